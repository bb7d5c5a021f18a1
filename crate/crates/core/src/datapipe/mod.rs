pub mod grammar;
pub mod manifest;
pub mod morph;
pub mod objects;
pub mod pairs;
pub mod pipeline;
pub mod scorer;
pub mod world;
