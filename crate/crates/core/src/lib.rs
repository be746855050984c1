pub mod checks;
pub mod eval;
pub mod iresnet;
pub mod losses;
pub mod numerics;
pub mod oracle;
pub mod prior;
pub mod problem;
pub mod train;
