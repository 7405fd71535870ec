pub mod api;
pub mod facets;
pub mod icr;
pub mod pipeline;
pub mod provider;
pub mod scoring;
pub mod vector_store;
