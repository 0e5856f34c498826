//! Classified errors and their JSON form on stderr.

use std::fmt;

use serde_json::json;

/// An error with a stable machine-readable kind.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn fail(kind: &'static str, message: impl Into<String>) -> anyhow::Error {
    Failure {
        kind,
        message: message.into(),
    }
    .into()
}

fn core_kind(e: &blockskip_core::Error) -> &'static str {
    use blockskip_core::Error::*;
    match e {
        ShapeMismatch { .. } | EmptyTensor { .. } | NotScalar { .. } => "shape",
        InvalidArgument(_) => "invalid_argument",
        TimestepOutOfRange { .. } => "invalid_argument",
        UninitializedCache { .. } => "uninitialized_cache",
        NonFinite(_) => "non_finite",
        Container(_) => "container",
        Io(_) => "io",
        Json(_) => "json",
    }
}

pub fn kind_of(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if let Some(e) = cause.downcast_ref::<blockskip_core::Error>() {
            return core_kind(e);
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
    }
    "error"
}

/// `{"error": {"kind": …, "message": …}}` on one line.
pub fn to_json(err: &anyhow::Error) -> String {
    json!({
        "error": {
            "kind": kind_of(err),
            "message": format!("{err:#}"),
        }
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn kinds_survive_context() {
        let e = Err::<(), _>(blockskip_core::Error::Container("bad".into()))
            .context("loading model")
            .unwrap_err();
        assert_eq!(kind_of(&e), "container");
        let v: serde_json::Value = serde_json::from_str(&to_json(&e)).unwrap();
        assert_eq!(v["error"]["message"], "loading model: model container: bad");
        assert_eq!(kind_of(&fail("exists", "x")), "exists");
    }
}
