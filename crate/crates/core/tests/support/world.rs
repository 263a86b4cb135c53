//! A small CSV-reporting corpus and a deterministic model that plays every
//! role in it: the task agent, both analysts, the merge operator and the
//! skill drafter. The agent's mistakes depend on what its skill says, so an
//! evolved skill scores better than the initial one.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use skill_distill::gateway::{ChatRequest, ChatResponse, GatewayError, ModelProfile, Role, ScriptedBackend, ToolCallRequest};

pub const SKILL_MD: &str = "---
name: csv-reports
description: Answer questions about CSV files and write small CSV reports with standard shell tools.
---
# CSV Reports

Use this skill for questions about comma-separated files in the working directory.

## Workflow

1. Read the task and find the input files.
2. Compute the answer with shell tools such as `awk`, `cut`, `sort` and `wc`.
3. Put the answer on the last line after `FINAL ANSWER:`.

## Counting records

`wc -l FILE` gives the number of records in a file.

## Reporting numbers

Report numbers as the tools print them.

## Output files

Write report files into the working directory.
";

pub const DRAFT_MD: &str = "---
name: csv-helper
description: Work through questions about CSV data with shell tools.
---
# CSV Helper

## Workflow

Open the input files, compute with `awk` or `sort`, and answer on a line starting with `FINAL ANSWER:`.

## Counting records

Count lines with `wc -l`.

## Reporting numbers

Print numbers plainly.

## Output files

Reports go into the working directory.
";

pub const BRIEF: &str = "Answering questions about small CSV files and writing CSV reports with POSIX shell tools.\n";

pub const INPUTS: &[(&str, &str)] = &[
    ("inputs/orders.csv", "order_id,customer,amount\n1001,acme,250\n1002,globex,120\n1003,acme,75\n1004,initech,300\n1005,umbrella,50\n1006,globex,200\n1007,acme,95\n"),
    ("inputs/customers.csv", "id,name,city\n1,acme,springfield\n2,globex,shelbyville\n3,initech,ogdenville\n4,umbrella,raccoon\n5,hooli,palo\n"),
    ("inputs/returns.csv", "return_id,order_id,refund\nr1,1001,12.50\nr2,1003,8.25\nr3,1004,6.00\nr4,1006,4.25\n"),
    ("inputs/sales.csv", "region,product,revenue\nnorth,widget,400\nsouth,widget,250\nnorth,gadget,300\neast,gadget,150\nsouth,gizmo,200\nwest,widget,150\n"),
    ("inputs/payments.csv", "payment_id,amount\np1,20.00\np2,15.25\np3,31.75\np4,19.50\n"),
    ("inputs/payments_q2.csv", "payment_id,amount\nq1,10.10\nq2,20.20\nq3,30.30\n"),
    ("inputs/inventory.csv", "sku,qty,warehouse\nA1,10,east\nA2,5,west\nB1,7,east\nB2,3,north\nC1,12,west\n"),
    ("inputs/scores.csv", "name,score\nana,88\nben,92\ncy,75\ndee,92\neli,81\n"),
    ("inputs/employees.csv", "name,dept,salary\nana,eng,6000\nben,ops,4500\ncy,eng,5500\ndee,sales,5000\n"),
];

pub const TRUTH_FILES: &[(&str, &str)] = &[
    ("truth/summary.csv", "warehouse,items\neast,17\nnorth,3\nwest,17\n"),
    ("truth/north.csv", "region,product,revenue\nnorth,widget,400\nnorth,gadget,300\n"),
    ("truth/regions.csv", "east\nnorth\nsouth\nwest\n"),
];

/// What the agent does on a task.
#[derive(Clone, Copy)]
pub enum Kind {
    /// Count data rows of a file.
    Count(&'static str),
    /// Sum a money column; `print` drops trailing zeros.
    Money(&'static str, u32),
    /// Run one pipeline and answer with its last word.
    Pipeline(&'static str),
    /// Run a pipeline and save its output (after `header`) to `file`.
    /// `.txt` is used instead of `.csv` unless the skill says otherwise.
    Report { cmd: &'static str, header: &'static str, file: &'static str },
}

pub struct Task {
    pub id: &'static str,
    pub query: &'static str,
    pub inputs: &'static [&'static str],
    /// Literal answer, or the truth file's path for a file task.
    pub truth: &'static str,
    pub kind: Kind,
}

/// How the error analyst behaves on a failed trajectory.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Analysis {
    /// Verifies a fix and names the cause.
    Verified,
    /// Keeps reading the trace until the budget runs out.
    Stalls,
    /// Verifies a fix but names no cause.
    NoCause,
    /// Names a cause without ever running `evaluate_fix`.
    Unverified,
}

pub fn evolve_tasks() -> Vec<Task> {
    use Kind::*;
    vec![
        Task { id: "e01", query: "How many orders are recorded in orders.csv?", inputs: &["inputs/orders.csv"], truth: "7", kind: Count("orders.csv") },
        Task { id: "e02", query: "How many customers are listed in customers.csv?", inputs: &["inputs/customers.csv"], truth: "5", kind: Count("customers.csv") },
        Task { id: "e03", query: "How many returns are recorded in returns.csv?", inputs: &["inputs/returns.csv"], truth: "4", kind: Count("returns.csv") },
        Task { id: "e04", query: "What is the total revenue in sales.csv?", inputs: &["inputs/sales.csv"], truth: "1450", kind: Pipeline("awk -F, 'NR>1{s+=$3} END{print s}' sales.csv") },
        Task { id: "e05", query: "What is the total amount paid in payments.csv, in dollars?", inputs: &["inputs/payments.csv"], truth: "86.50", kind: Money("payments.csv", 2) },
        Task {
            id: "e06",
            query: "Write the total quantity per warehouse in inventory.csv to summary.csv, with the header `warehouse,items` and one `warehouse,total` line per warehouse sorted by name.",
            inputs: &["inputs/inventory.csv"],
            truth: "truth/summary.csv",
            kind: Report { cmd: "awk -F, 'NR>1{w[$3]+=$2} END{for(k in w) print k\",\"w[k]}' inventory.csv | sort", header: "warehouse,items\n", file: "summary.csv" },
        },
        Task { id: "e07", query: "What is the highest score in scores.csv?", inputs: &["inputs/scores.csv"], truth: "92", kind: Pipeline("tail -n +2 scores.csv | cut -d, -f2 | sort -n | tail -n 1") },
        Task { id: "e08", query: "How many distinct departments appear in employees.csv?", inputs: &["inputs/employees.csv"], truth: "3", kind: Pipeline("tail -n +2 employees.csv | cut -d, -f2 | sort -u | wc -l") },
        Task { id: "e09", query: "What is the average salary in employees.csv, in dollars?", inputs: &["inputs/employees.csv"], truth: "5250.00", kind: Pipeline("awk -F, 'NR>1{s+=$3;n++} END{print s/n}' employees.csv") },
        Task {
            id: "e10",
            query: "Copy the rows of sales.csv whose region is north into north.csv, keeping the header line.",
            inputs: &["inputs/sales.csv"],
            truth: "truth/north.csv",
            kind: Pipeline("head -n 1 sales.csv > north.csv && grep '^north,' sales.csv >> north.csv && wc -l < north.csv"),
        },
        Task { id: "e11", query: "How many products are listed in inventory.csv?", inputs: &["inputs/inventory.csv"], truth: "5", kind: Count("inventory.csv") },
        Task { id: "e12", query: "What is the total refund amount in returns.csv, in dollars?", inputs: &["inputs/returns.csv"], truth: "31.00", kind: Money("returns.csv", 3) },
        Task { id: "e13", query: "What is the lowest score in scores.csv?", inputs: &["inputs/scores.csv"], truth: "75", kind: Pipeline("tail -n +2 scores.csv | cut -d, -f2 | sort -n | head -n 1") },
        Task {
            id: "e14",
            query: "Which region has the largest total revenue in sales.csv?",
            inputs: &["inputs/sales.csv"],
            truth: "north",
            kind: Pipeline("awk -F, 'NR>1{r[$1]+=$3} END{for(k in r) print r[k], k}' sales.csv | sort -n | tail -n 1"),
        },
    ]
}

pub fn test_tasks() -> Vec<Task> {
    use Kind::*;
    vec![
        Task { id: "t01", query: "How many employees are listed in employees.csv?", inputs: &["inputs/employees.csv"], truth: "4", kind: Count("employees.csv") },
        Task { id: "t02", query: "What is the total amount paid in payments_q2.csv, in dollars?", inputs: &["inputs/payments_q2.csv"], truth: "60.60", kind: Money("payments_q2.csv", 2) },
        Task {
            id: "t03",
            query: "Write the distinct regions of sales.csv to regions.csv, one per line, sorted.",
            inputs: &["inputs/sales.csv"],
            truth: "truth/regions.csv",
            kind: Report { cmd: "tail -n +2 sales.csv | cut -d, -f1 | sort -u", header: "", file: "regions.csv" },
        },
        Task { id: "t04", query: "What is the highest salary in employees.csv?", inputs: &["inputs/employees.csv"], truth: "6000", kind: Pipeline("tail -n +2 employees.csv | cut -d, -f3 | sort -n | tail -n 1") },
    ]
}

/// Expected behaviour of the error analyst per failed evolve task.
pub fn analysis_plan(task_id: &str) -> Analysis {
    match task_id {
        "e03" => Analysis::Stalls,
        "e09" => Analysis::NoCause,
        "e11" => Analysis::Unverified,
        _ => Analysis::Verified,
    }
}

/// Evolve tasks the agent fails with the initial skill.
pub const FAILING: &[&str] = &["e01", "e02", "e03", "e05", "e06", "e09", "e11", "e12"];

const HEADER_RULE: &str = "Never count the header row";
const MONEY_RULE: &str = "two decimal places";
const FILE_RULE: &str = "exact file name";

fn task_json(t: &Task) -> Value {
    let file_task = t.truth.starts_with("truth/");
    let truth = if file_task { json!({ "file": { "path": t.truth } }) } else { json!({ "literal": t.truth }) };
    json!({
        "task_id": t.id,
        "query": t.query,
        "input_paths": t.inputs,
        "ground_truth": truth,
        "evaluator_id": if file_task { "file_compare" } else { "exact_match" },
    })
}

pub const CONFIG: &str = r#"mode = "deepening"
skill = "skill"
evolve_tasks = "evolve_tasks.json"
test_tasks = "test_tasks.json"
analysts = "combined"
consolidation = "parallel"
seeds = [41]
workers = 8

[profiles.rollout]
endpoint = "http://localhost:8000/v1"
model = "local-model"
mode = "instruct"
concurrency_cap = 16

[profiles.success]
endpoint = "http://localhost:8000/v1"
model = "local-model"
mode = "thinking"
concurrency_cap = 16

[profiles.error]
endpoint = "http://localhost:8000/v1"
model = "local-model"
mode = "instruct"
concurrency_cap = 16

[profiles.merge]
endpoint = "http://localhost:8000/v1"
model = "local-model"
mode = "thinking"
concurrency_cap = 16

[rollout]
turn_budget = 20
role = "data-analysis"
tool_timeout_secs = 30

[analysis]
error_budget = 12

[merge]
batch_size = 2
level_cap = 8
sequential_batches = [4]
"#;

/// The deepening config turned into a creation run without a test set.
pub fn creation_config() -> String {
    CONFIG
        .replace("mode = \"deepening\"\nskill = \"skill\"", "mode = \"creation\"\ndomain_brief_file = \"brief.md\"")
        .replace("test_tasks = \"test_tasks.json\"\n", "")
}

fn write(dir: &Path, rel: &str, text: &str) {
    let p = dir.join(rel);
    fs::create_dir_all(p.parent().unwrap()).unwrap();
    fs::write(p, text).unwrap();
}

/// Writes the corpus (everything but fixtures) under `dir`.
pub fn write_corpus(dir: &Path) {
    write(dir, "skill/SKILL.md", SKILL_MD);
    write(dir, "brief.md", BRIEF);
    for (rel, text) in INPUTS.iter().chain(TRUTH_FILES) {
        write(dir, rel, text);
    }
    let set = |role: &str, tasks: Vec<Task>| {
        let v = json!({ "role": role, "tasks": tasks.iter().map(task_json).collect::<Vec<_>>() });
        format!("{}\n", serde_json::to_string_pretty(&v).unwrap())
    };
    write(dir, "evolve_tasks.json", &set("evolve", evolve_tasks()));
    write(dir, "test_tasks.json", &set("test", test_tasks()));
    write(dir, "config.toml", CONFIG);
    write(dir, "creation.toml", &creation_config());
}

fn find_task(text: &str) -> Option<Task> {
    evolve_tasks().into_iter().chain(test_tasks()).find(|t| text.contains(t.query))
}

fn turn(request: &ChatRequest) -> usize {
    request.messages.iter().filter(|m| m.role == Role::Assistant).count()
}

fn last_tool_output(request: &ChatRequest) -> String {
    request.messages.iter().rev().find(|m| m.role == Role::Tool).map(|m| m.content.clone()).unwrap_or_default()
}

fn stdout_of(observation: &str) -> String {
    let Some(start) = observation.find("stdout:\n") else { return String::new() };
    let rest = &observation[start + 8..];
    rest.split("stderr:\n").next().unwrap_or("").to_string()
}

fn call(k: usize, name: &str, arguments: Value) -> ChatResponse {
    ChatResponse { content: String::new(), tool_calls: vec![ToolCallRequest { id: format!("call_{k}"), name: name.into(), arguments }] }
}

fn say(text: impl Into<String>) -> ChatResponse {
    ChatResponse::text(text)
}

fn agent(request: &ChatRequest) -> ChatResponse {
    let system = &request.messages[0].content;
    let Some(task) = find_task(system) else { return say("I cannot tell what the task is.\nFINAL ANSWER: unknown") };
    let k = turn(request);
    let obs = last_tool_output(request);
    match task.kind {
        Kind::Count(file) => match k {
            0 => call(k, "bash", json!({ "command": format!("head -n 3 {file}") })),
            1 if system.contains(HEADER_RULE) => call(k, "bash", json!({ "command": format!("tail -n +2 {file} | wc -l") })),
            1 => call(k, "bash", json!({ "command": format!("wc -l < {file}") })),
            _ => say(format!("Counted the records.\nFINAL ANSWER: {}", stdout_of(&obs).trim())),
        },
        Kind::Money(file, col) => match k {
            0 => call(k, "bash", json!({ "command": format!("head -n 3 {file}") })),
            1 if system.contains(MONEY_RULE) => {
                call(k, "bash", json!({ "command": format!("awk -F, 'NR>1{{s+=${col}}} END{{printf \"%.2f\\n\", s}}' {file}") }))
            }
            1 => call(k, "bash", json!({ "command": format!("awk -F, 'NR>1{{s+=${col}}} END{{print s}}' {file}") })),
            _ => say(format!("Summed the amounts.\nFINAL ANSWER: {}", stdout_of(&obs).trim())),
        },
        Kind::Pipeline(cmd) => match k {
            0 => call(k, "bash", json!({ "command": cmd })),
            _ => {
                let out = stdout_of(&obs);
                let answer = out.split_whitespace().last().unwrap_or("");
                let answer = if task.id == "e10" { "north.csv written" } else { answer };
                say(format!("Read the result off the pipeline.\nFINAL ANSWER: {answer}"))
            }
        },
        Kind::Report { cmd, header, file } => match k {
            0 => call(k, "bash", json!({ "command": cmd })),
            1 => {
                let target = if system.contains(FILE_RULE) { file.to_string() } else { file.replace(".csv", ".txt") };
                call(k, "write_file", json!({ "path": target, "content": format!("{header}{}", stdout_of(&obs)) }))
            }
            _ => say("The report is written.\nFINAL ANSWER: done"),
        },
    }
}

/// Line number (1-based, whole file) of the `wc -l` advice in a skill
/// rendered with line numbers, if the skill has it.
fn wc_line(prompt: &str) -> Option<usize> {
    prompt.lines().find_map(|l| {
        let (num, text) = l.split_once(" | ")?;
        if text.contains("wc -l") && !text.contains(HEADER_RULE) {
            num.trim().parse().ok()
        } else {
            None
        }
    })
}

fn error_patch(task: &Task, prompt: &str) -> Value {
    match task.kind {
        Kind::Count(_) => {
            let content = format!("{HEADER_RULE}: the first line holds column names. Count data rows with `tail -n +2 FILE | wc -l`.");
            let edit = match wc_line(prompt) {
                Some(n) => json!({ "file": "SKILL.md", "op": "replace_lines", "start": n, "end": n, "content": content }),
                None => json!({ "file": "SKILL.md", "op": "insert_after", "target_section": "## Counting records", "content": content }),
            };
            json!({
                "themes": ["header-row-counting"],
                "memory_items": [{ "title": "Header rows are not records", "description": "CSV files start with a header line that line counts include." }],
                "patch": { "reasoning": "The agent counted the header line as a record.", "edits": [edit], "changelog_entries": ["Counting excludes the header row"] },
            })
        }
        Kind::Money(..) | Kind::Pipeline(_) => json!({
            "themes": ["money-formatting"],
            "memory_items": [{ "title": "Money keeps its cents", "description": "awk's print drops trailing zeros; format amounts explicitly." }],
            "patch": {
                "reasoning": "The amount was printed without its trailing zero.",
                "edits": [{ "file": "SKILL.md", "op": "insert_after", "target_section": "## Reporting numbers", "content": format!("Give money amounts with {MONEY_RULE}, for example `printf \"%.2f\\n\"` in awk; `print` drops trailing zeros.") }],
                "changelog_entries": ["Money amounts use two decimals"],
            },
        }),
        Kind::Report { .. } => json!({
            "themes": ["output-file-naming"],
            "memory_items": [{ "title": "Output names are part of the answer", "description": "Graders look for the file name the task gives, extension included." }],
            "patch": {
                "reasoning": "The report was saved under a different extension than the task asked for.",
                "edits": [
                    { "file": "references/output-files.md", "op": "create", "content": "# Output files\n\nSave every report under the file name the task gives, extension included. A grader looks for that name and nothing else.\n\nCheck with `ls` before answering.\n" },
                    { "file": "SKILL.md", "op": "insert_after", "target_section": "## Output files", "content": format!("Save results under the {FILE_RULE} the task asks for; see [output files](references/output-files.md).") },
                ],
                "changelog_entries": ["Reports use the requested file name"],
            },
        }),
    }
}

fn error_analyst(request: &ChatRequest) -> ChatResponse {
    let user = &request.messages[1].content;
    let id = user.split("failed trajectory ").nth(1).and_then(|r| r.split(' ').next()).unwrap_or("");
    let Some(task) = evolve_tasks().into_iter().find(|t| t.id == id) else { return say("{}") };
    let plan = analysis_plan(id);
    let k = turn(request);
    let obs = last_tool_output(request);
    let file_task = task.truth.starts_with("truth/");
    let truth_name = task.truth.rsplit('/').next().unwrap();
    if plan == Analysis::Stalls {
        return call(k, "read_trace", json!({ "step": k % 3 + 1 }));
    }
    if plan == Analysis::Unverified {
        return match k {
            0 => call(k, "read_trace", json!({})),
            _ => {
                let mut out = error_patch(&task, &request.messages[0].content);
                out["failure_cause_items"] = json!([{ "cause": "The count includes the header line.", "evidence": "wc -l printed one more than the data rows." }]);
                say(format!("```json\n{out}\n```"))
            }
        };
    }
    let script: Vec<ChatResponse> = if file_task {
        vec![
            call(0, "read_trace", json!({})),
            call(1, "read_file", json!({ "path": "artifacts" })),
            call(2, "read_file", json!({ "path": format!("ground_truth/{truth_name}") })),
        ]
    } else {
        vec![call(0, "read_trace", json!({})), call(1, "read_file", json!({ "path": "ground_truth/answer.txt" }))]
    };
    if k < script.len() {
        return script[k].clone();
    }
    if k == script.len() {
        let args = if file_task { json!({ "path": truth_name, "content": obs }) } else { json!({ "answer": obs.trim() }) };
        return call(k, "write_candidate_fix", args);
    }
    if k == script.len() + 1 {
        return call(k, "evaluate_fix", json!({}));
    }
    let mut out = error_patch(&task, &request.messages[0].content);
    out["failure_cause_items"] = if plan == Analysis::NoCause {
        json!([])
    } else {
        json!([{ "cause": format!("The agent's answer did not match the expected output for: {}", task.query), "evidence": "evaluate_fix passed once the output was corrected." }])
    };
    say(format!("The fix is verified.\n```json\n{out}\n```"))
}

fn success_analyst(request: &ChatRequest) -> ChatResponse {
    let prompt = &request.messages[0].content;
    let Some(task) = find_task(prompt) else { return say("{}") };
    let (theme, section, content) = match task.id {
        "e10" => ("keep-header", "## Output files", "Keep the header line when writing a filtered copy of a CSV file."),
        "e08" | "e14" => ("single-pipeline", "## Workflow", "Compute with one shell pipeline and read the result straight from its output."),
        _ => ("inspect-first", "## Workflow", "Look at the first lines of every input (`head -n 3 FILE`) before computing on it."),
    };
    let out = json!({
        "memory_items": [{ "title": theme, "description": content, "examples": [task.query] }],
        "themes": [theme],
        "patch": {
            "reasoning": format!("The successful run relied on: {content}"),
            "edits": [{ "file": "SKILL.md", "op": "insert_after", "target_section": section, "content": content }],
            "changelog_entries": [format!("Added pattern: {theme}")],
        },
    });
    say(out.to_string())
}

/// Routes a request to the role it was written for.
pub fn respond(request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
    let first = request.messages.first().map(|m| m.content.as_str()).unwrap_or("");
    Ok(if first.starts_with("You are an expert failure-analysis agent") {
        error_analyst(request)
    } else if first.starts_with("You are an expert in success pattern analysis") {
        success_analyst(request)
    } else if first.starts_with("You are a skill edit coordinator") {
        say(super::echo_merge(first))
    } else if first.starts_with("Write an agent skill") {
        say(DRAFT_MD)
    } else {
        agent(request)
    })
}

pub fn backend() -> ScriptedBackend<impl Fn(&ModelProfile, &ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync> {
    ScriptedBackend(|_: &ModelProfile, r: &ChatRequest| respond(r))
}
