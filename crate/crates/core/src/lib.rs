//! Core of the post-operative follow-up assistant: report templates, the
//! session engine, model providers, answer verification and report building,
//! plus the patient simulator and evaluation metrics used offline.

pub mod clock;
pub mod metrics;
pub mod provider;
pub mod report;
pub mod session;
pub mod simulator;
pub mod template;
pub mod text;
pub mod verification;

pub use clock::{Clock, StepClock, SystemClock};
pub use report::{Report, ReportFormat};
pub use session::{EngineConfig, PatientProfile, Session, SessionEngine, StepOutcome};
pub use template::{FieldKind, FieldSpec, Template};
