use axonflow::compiler::{CompileError, ProgramIoError};
use axonflow::nngraph::{GraphError, OracleError, TensorError};
use axonflow::runtime::RuntimeError;
use axonflow::zoo::ZooError;
use serde::Serialize;
use serde_json::{json, Value};

/// Error reported to the caller as `{"error": {...}}` with a nonzero exit.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub kind: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

impl Failure {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        Failure { kind: kind.to_string(), message: message.into(), details: None }
    }

    pub fn envelope(&self) -> String {
        json!({ "error": self }).to_string()
    }
}

fn graph_errors(errs: &[GraphError]) -> Value {
    errs.iter().map(|e| json!({ "kind": e.kind(), "message": e.to_string() })).collect()
}

impl From<Vec<GraphError>> for Failure {
    fn from(errs: Vec<GraphError>) -> Self {
        let message = errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ");
        Failure { kind: "InvalidGraph".into(), message, details: Some(graph_errors(&errs)) }
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        Failure::new(e.kind(), e.to_string())
    }
}

impl From<CompileError> for Failure {
    fn from(e: CompileError) -> Self {
        let details = match &e {
            CompileError::Graph(errs) => Some(graph_errors(errs)),
            _ => None,
        };
        Failure { kind: e.kind().into(), message: e.to_string(), details }
    }
}

impl From<RuntimeError> for Failure {
    fn from(e: RuntimeError) -> Self {
        Failure::new(e.kind(), e.to_string())
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        let kind = match e {
            OracleError::MissingInput(_) => "MissingInput",
            OracleError::ShapeMismatch { .. } => "ShapeMismatch",
            OracleError::AccumulatorOverflow(_) => "AccumulatorOverflow",
        };
        Failure::new(kind, e.to_string())
    }
}

impl From<ZooError> for Failure {
    fn from(e: ZooError) -> Self {
        let kind = match e {
            ZooError::UnknownNetwork(_) => "UnknownNetwork",
            ZooError::BadInput { .. } => "BadInput",
        };
        Failure::new(kind, e.to_string())
    }
}

impl From<ProgramIoError> for Failure {
    fn from(e: ProgramIoError) -> Self {
        Failure::new("ProgramIo", e.to_string())
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        Failure::new("TensorIo", e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new("Io", e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new("Json", e.to_string())
    }
}

impl From<axonflow::memmodel::MemError> for Failure {
    fn from(e: axonflow::memmodel::MemError) -> Self {
        Failure::new("Memmodel", e.to_string())
    }
}
