//! Audit and solve reports: a machine-readable JSON document plus a
//! human-readable rendering.
//!
//! The JSON report is fully deterministic for a fixed model, program and
//! seed — field order is fixed by the struct definitions and no wall-clock
//! data is included, so identical runs produce byte-identical files. Timing
//! belongs to the human rendering only.

use serde::Serialize;

use crate::dp::{DpModel, SolveOptions, ValueTable};
use crate::dp::{self, DpError};
use crate::grid::TableValue;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// A premise of the backing theorem was not certified; distinct from a
    /// failed check.
    NotApplicable,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub status: CheckStatus,
    pub summary: String,
    pub detail: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OverallStatus {
    Pass,
    Fail,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub model_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub checks: Vec<CheckOutcome>,
    pub overall: OverallStatus,
}

impl Report {
    pub fn new(command: impl Into<String>, model_digest: impl Into<String>, seed: Option<u64>) -> Self {
        Self {
            tool: "nsdp",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            model_digest: model_digest.into(),
            seed,
            checks: Vec::new(),
            overall: OverallStatus::Pass,
        }
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        status: CheckStatus,
        summary: impl Into<String>,
        detail: serde_json::Value,
    ) {
        if status == CheckStatus::Fail {
            self.overall = OverallStatus::Fail;
        }
        self.checks.push(CheckOutcome {
            name: name.into(),
            status,
            summary: summary.into(),
            detail,
        });
    }

    pub fn passed(&self) -> bool {
        self.overall == OverallStatus::Pass
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Human-readable rendering; `elapsed` is appended here and only here.
    pub fn render_text(&self, elapsed: Option<std::time::Duration>) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{} {} — {}\nmodel {}\n",
            self.tool, self.version, self.command, self.model_digest
        ));
        if let Some(seed) = self.seed {
            out.push_str(&format!("seed {seed}\n"));
        }
        for check in &self.checks {
            let tag = match check.status {
                CheckStatus::Pass => "PASS",
                CheckStatus::Fail => "FAIL",
                CheckStatus::NotApplicable => "N/A ",
            };
            out.push_str(&format!("  [{tag}] {}: {}\n", check.name, check.summary));
        }
        out.push_str(&format!(
            "overall: {}\n",
            match self.overall {
                OverallStatus::Pass => "pass",
                OverallStatus::Fail => "fail",
            }
        ));
        if let Some(elapsed) = elapsed {
            out.push_str(&format!("elapsed: {:.3}s\n", elapsed.as_secs_f64()));
        }
        out
    }
}

/// Tabular export of a solved value table: one row per grid node with stage,
/// coordinates, value and the policy candidate set.
pub fn export_value_table(
    model: &DpModel,
    table: &ValueTable,
    opts: &SolveOptions,
    policy_value_tol: f64,
) -> Result<String, DpError> {
    let mut out = String::from("stage\tcoords\tvalue\tpolicy\n");
    for t in 0..=table.t_eff {
        let grid = model.state_grid(t);
        for (idx, value) in table.stage_values[t].iter().enumerate() {
            let node = grid.node(idx);
            let coords = node.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
            let (value_text, policy_text) = match value {
                TableValue::Infeasible => ("inf".to_string(), "-".to_string()),
                TableValue::Finite(v) => {
                    let policy = dp::extract_policy(model, table, t, &node, opts, policy_value_tol)
                        .map(|p| {
                            p.generators()
                                .iter()
                                .map(|g| {
                                    g.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
                                })
                                .collect::<Vec<_>>()
                                .join("|")
                        })
                        .unwrap_or_else(|_| "-".to_string());
                    (v.to_string(), policy)
                }
            };
            out.push_str(&format!("{t}\t{coords}\t{value_text}\t{policy_text}\n"));
        }
    }
    Ok(out)
}
