//! G-Local pi-calculus toolkit: parse, execute, explore and statically
//! analyse processes that acquire and release policy-guarded stateful
//! resources.
//!
//! The crate is organised around the pipeline
//! `parser` -> `ast` -> (`semantics` + `explorer` | `cfa`), with `policy`
//! providing the automata that decide which resource usages are admitted.

pub mod ast;
pub mod cfa;
pub mod error;
pub mod explorer;
pub mod parser;
pub mod policy;
pub mod semantics;

pub use ast::{ActionName, BoundaryLabel, Event, Name, NameKind, Prefix, SpecialAction, Term, Trace};
pub use error::{Error, Result};
pub use explorer::{Bounds, ComplianceStatus, LtsGraph, Verdict};
pub use parser::{Model, SourceDocument};
pub use policy::{PolicyAutomaton, PolicyOutcome, PolicyTable};
pub use semantics::{ReconfigEvent, StepMode, TransitionLabel};
