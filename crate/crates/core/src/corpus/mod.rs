//! Deterministic synthetic stand-in for a multi-view driving QA dataset.

pub mod format;
pub mod query;
pub mod scene;
pub mod tables;

pub use format::{build_corpus, Corpus, DEFAULT_VAL_FRACTION};
pub use query::{gen_query, QuerySample};
pub use scene::{gen_scene, render_all, render_view, BBox, ObjectClass, SceneObject, SceneSpec, ViewImage};
pub use tables::{tokenize, Vocab, NUM_VIEWS};
