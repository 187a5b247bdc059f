pub mod angle;
pub mod depth;
pub mod fsm;
pub mod gesture;
pub mod link;
pub mod model;
pub mod plan;
pub mod replay;
pub mod session;
