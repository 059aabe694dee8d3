//! Retrieval-augmented in-context image classification.
//!
//! A demo set of labeled images is stored as embeddings ([`kb`]) and searched
//! exactly with a flat L2 index ([`index`]). For each query image the
//! [`retriever`] selects demonstrations, [`prompt`] renders them into an
//! interleaved image/text document for a multimodal [`generator`], and
//! [`eval`] scores the parsed answers against baselines.

pub mod cli;
pub mod eval;
pub mod generator;
pub mod index;
pub mod kb;
pub mod prompt;
pub mod retriever;
pub mod synthetic;

pub use eval::{EvaluationReport, Mode, QueryRecord};
pub use generator::{
    EchoModalGenerator, Generator, GeneratorConfig, HttpGenerator, ScriptedGenerator,
};
pub use index::{l2_distance, FlatIndex, Neighbor};
pub use kb::{
    read_kb, write_kb, Dataset, DatasetManifest, EmbeddingMatrix, KbEntry, KnowledgeBase, Task,
};
pub use prompt::{parse_answer, render_prompt, ParsedAnswer, PromptDocument, PromptPart};
pub use retriever::{order_for_prompt, DemoExample, OrderingPolicy, Retriever, SelectionStrategy};
