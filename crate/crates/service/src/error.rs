use thiserror::Error;

use crate::store::SessionState;

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("session is {found}, operation requires {expected}")]
    State { expected: String, found: SessionState },

    #[error("job in progress: {0}")]
    Busy(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("corrupt session: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Core(#[from] fusionforge_core::Error),
}

impl ServiceError {
    pub fn bad(msg: impl Into<String>) -> Self {
        ServiceError::BadRequest(msg.into())
    }
}
