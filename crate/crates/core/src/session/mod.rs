//! Follow-up sessions: state, the event log and the engine that drives them.

mod engine;
mod events;
mod types;

pub use engine::{field_dialogue_segment, mentioned_fields, next_field, EngineError, SessionEngine, StepOutcome};
pub use events::{read_event_log, EventSink, FileEventLog, MemorySink, NullSink, ReplayError, SessionEvent};
pub use types::{
    AskStyle, EngineConfig, FieldState, FieldStatus, Modality, PatientProfile, Phase, Session, Speaker, Turn,
};
