pub mod paths;
pub mod skill;
pub mod patch;
pub mod trajectory;
pub mod gateway;
pub mod template;
pub mod react;
pub mod rollout;
pub mod analysts;
pub mod consolidator;
pub mod pipeline;
