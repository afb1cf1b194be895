pub mod oracle;
pub mod scan;
pub mod world;
