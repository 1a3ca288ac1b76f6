use serde::Serialize;

/// Picks the process exit code and the HTTP status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    InvalidInput,
    NotFound,
    TooLarge,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Internal => 1,
            ErrorKind::InvalidInput | ErrorKind::TooLarge => 2,
            ErrorKind::NotFound => 3,
        }
    }

    pub fn http_status(self) -> u16 {
        match self {
            ErrorKind::InvalidInput => 400,
            ErrorKind::NotFound => 404,
            ErrorKind::TooLarge => 413,
            ErrorKind::Internal => 500,
        }
    }
}

/// Machine-readable error: `{"error": ..., "field": ..., "kind": ...}`.
#[derive(Debug, Clone, Serialize)]
pub struct AppError {
    pub error: String,
    pub field: Option<String>,
    pub kind: ErrorKind,
}

impl AppError {
    pub fn new(kind: ErrorKind, msg: impl Into<String>) -> Self {
        AppError {
            error: msg.into(),
            field: None,
            kind,
        }
    }

    pub fn invalid(field: &str, msg: impl Into<String>) -> Self {
        AppError::new(ErrorKind::InvalidInput, msg).with_field(field)
    }

    pub fn not_found(field: &str, msg: impl Into<String>) -> Self {
        AppError::new(ErrorKind::NotFound, msg).with_field(field)
    }

    pub fn with_field(mut self, field: &str) -> Self {
        self.field = Some(field.to_string());
        self
    }

    /// Attaches `field` unless one is already set.
    pub fn or_field(mut self, field: &str) -> Self {
        if self.field.is_none() {
            self.field = Some(field.to_string());
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{} ({field})", self.error),
            None => f.write_str(&self.error),
        }
    }
}

impl std::error::Error for AppError {}

impl From<gsavatar_core::Error> for AppError {
    fn from(e: gsavatar_core::Error) -> Self {
        use gsavatar_core::Error as E;
        let kind = match &e {
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ErrorKind::NotFound,
            _ => ErrorKind::InvalidInput,
        };
        AppError::new(kind, e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    /// Names the field for missing, unknown or mistyped members when serde
    /// reports it.
    fn from(e: serde_json::Error) -> Self {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.starts_with("missing field") || msg.starts_with("unknown field") || msg.starts_with("duplicate field"));
        let mut out = AppError::new(ErrorKind::InvalidInput, format!("malformed JSON: {msg}"));
        out.field = field.map(str::to_string);
        out
    }
}

pub type AppResult<T> = std::result::Result<T, AppError>;
