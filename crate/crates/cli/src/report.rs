use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::args::ReportFormat;

/// Version tag carried by every JSON report.
pub const REPORT_SCHEMA: &str = "lidarsplat.report/1";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportError {
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

/// Outcome of one subcommand. Successful reports go to stdout, failures to
/// stderr.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub command: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ReportError>,
}

impl Report {
    pub fn success(command: &str, result: Value) -> Self {
        Report {
            schema: REPORT_SCHEMA,
            command: command.into(),
            ok: true,
            result: Some(result),
            error: None,
        }
    }

    pub fn failure(command: &str, kind: &str, message: &str, exit_code: i32) -> Self {
        Report {
            schema: REPORT_SCHEMA,
            command: command.into(),
            ok: false,
            result: None,
            error: Some(ReportError {
                kind: kind.into(),
                message: message.into(),
                exit_code,
            }),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json() + "\n")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match (&self.result, &self.error) {
            (_, Some(e)) => {
                out.push_str(&format!("error ({}): {}\n", e.kind, e.message));
            }
            (Some(Value::Object(map)), None) => {
                out.push_str(&format!("{}: ok\n", self.command));
                for (k, v) in map {
                    let shown = match v {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    out.push_str(&format!("  {k}: {shown}\n"));
                }
            }
            (Some(v), None) => out.push_str(&format!("{}: ok\n  {v}\n", self.command)),
            (None, None) => out.push_str(&format!("{}: ok\n", self.command)),
        }
        out
    }

    pub fn emit(&self, format: ReportFormat) {
        let text = match format {
            ReportFormat::Json => self.to_json() + "\n",
            ReportFormat::Text => self.to_text(),
        };
        if self.ok {
            print!("{text}");
        } else {
            eprint!("{text}");
        }
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    #[test]
    fn json_shape() {
        let ok = Report::success("validate", json!({"frames": 5}));
        let v: Value = serde_json::from_str(&ok.to_json()).unwrap();
        assert_eq!(v["schema"], REPORT_SCHEMA);
        assert_eq!(v["ok"], true);
        assert_eq!(v["result"]["frames"], 5);
        assert!(v.get("error").is_none());
        let bad = Report::failure("render", "MissingAsset", "missing asset: x", 1);
        let v: Value = serde_json::from_str(&bad.to_json()).unwrap();
        assert_eq!(v["error"]["kind"], "MissingAsset");
        assert_eq!(v["error"]["exit_code"], 1);
        assert!(v.get("result").is_none());
    }

    #[test]
    fn text_lists_result_fields() {
        let ok = Report::success("eval", json!({"mean_psnr": 31.5, "out": "a.png"}));
        assert_eq!(ok.to_text(), "eval: ok\n  mean_psnr: 31.5\n  out: a.png\n");
    }
}
