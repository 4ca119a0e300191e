pub mod exact;
pub mod trends;

pub enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

impl Outcome {
    pub fn check(ok: bool, detail: String) -> Self {
        if ok {
            Self::Pass(detail)
        } else {
            Self::Fail(detail)
        }
    }

    pub fn detail(&self) -> &str {
        match self {
            Self::Pass(d) | Self::Fail(d) | Self::Skip(d) => d,
        }
    }
}

impl<E: std::fmt::Display> From<Result<Outcome, E>> for Outcome {
    fn from(r: Result<Outcome, E>) -> Self {
        r.unwrap_or_else(|e| Self::Fail(format!("error: {e}")))
    }
}
