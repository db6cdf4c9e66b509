use std::fmt::Write as _;

use serde::Deserialize;
use serde_json::{Map, Value};

use crate::data::ModalSample;
use crate::error::{Error, Result};
use crate::metrics::MetricTable;

use super::{evaluate, TrainConfig, Trainer};

/// Row presets of the standard ablation grid, in table order.
pub const PRESETS: [&str; 6] = ["baseline", "+scma", "+scma+mcma", "+ip", "+ap", "vca"];

/// Config overrides of a named preset.
pub fn preset(name: &str) -> Option<Value> {
    let v = match name {
        "baseline" => serde_json::json!({"scma": false, "mcma": false, "block": "hybrid", "prompting_mode": "off"}),
        "+scma" => serde_json::json!({"scma": true, "mcma": false, "block": "hybrid", "prompting_mode": "off"}),
        "+scma+mcma" => serde_json::json!({"scma": true, "mcma": true, "block": "hybrid", "prompting_mode": "off"}),
        "+ip" => serde_json::json!({"scma": true, "mcma": true, "block": "hybrid", "prompting_mode": "ip"}),
        "+ap" => serde_json::json!({"scma": true, "mcma": true, "block": "hybrid", "prompting_mode": "ap"}),
        "vca" => serde_json::json!({"scma": true, "mcma": false, "block": "vca", "prompting_mode": "ap"}),
        _ => return None,
    };
    Some(v)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum RowSpec {
    Preset(String),
    Custom {
        name: String,
        #[serde(default)]
        overrides: Map<String, Value>,
    },
}

/// A base configuration plus one row per model variant.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(default)]
    pub base: Map<String, Value>,
    pub rows: Vec<RowSpec>,
}

impl AblationGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        let g: AblationGrid = serde_json::from_str(text).map_err(|e| Error::Config(format!("grid: {e}")))?;
        if g.rows.is_empty() {
            return Err(Error::Config("grid has no rows".into()));
        }
        g.resolve()?;
        Ok(g)
    }

    /// The grid with every preset row.
    pub fn standard(base: Map<String, Value>) -> Self {
        AblationGrid {
            base,
            rows: PRESETS.iter().map(|p| RowSpec::Preset(p.to_string())).collect(),
        }
    }

    /// Named, validated configurations, one per row.
    pub fn resolve(&self) -> Result<Vec<(String, TrainConfig)>> {
        self.rows
            .iter()
            .map(|row| {
                let (name, overrides) = match row {
                    RowSpec::Preset(p) => {
                        let v = preset(p).ok_or_else(|| {
                            Error::Config(format!("unknown preset row `{p}`; known: {}", PRESETS.join(", ")))
                        })?;
                        (p.clone(), v.as_object().cloned().expect("preset objects"))
                    }
                    RowSpec::Custom { name, overrides } => (name.clone(), overrides.clone()),
                };
                let mut merged = self.base.clone();
                merged.extend(overrides);
                let cfg: TrainConfig = serde_json::from_value(Value::Object(merged))
                    .map_err(|e| Error::Config(format!("row {name}: {e}")))?;
                cfg.validate()
                    .map_err(|e| Error::Config(format!("row {name}: {e}")))?;
                Ok((name, cfg))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub name: String,
    /// Trainable scalars of the trained model, prompts included.
    pub params: usize,
    /// Scalars used at inference.
    pub inference_params: usize,
    pub table: MetricTable,
}

/// Trains every row on `train` (selecting by `val` GAME(0) when `val` is
/// non-empty) and evaluates on `test`.
pub fn run_ablation(
    grid: &AblationGrid,
    train: &[ModalSample],
    val: &[ModalSample],
    test: &[ModalSample],
    mut on_row: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::new();
    for (name, cfg) in grid.resolve()? {
        let stride = cfg.stride;
        let mut t = Trainer::new(cfg)?;
        t.fit(train, val, None)?;
        let model = t.best_model()?;
        let result = AblationResult {
            name,
            params: model.num_params(),
            inference_params: model.num_params() - model.num_prompt_params(),
            table: evaluate(&model, test, stride)?.table,
        };
        on_row(&result);
        out.push(result);
    }
    Ok(out)
}

pub fn ablation_text(rows: &[AblationResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "row", "params", "GAME(0)", "GAME(1)", "GAME(2)", "GAME(3)", "RMSE"
    );
    for r in rows {
        let g = r.table.game;
        let _ = writeln!(
            s,
            "{:<14} {:>10} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            r.name, r.params, g[0], g[1], g[2], g[3], r.table.rmse
        );
    }
    s
}

pub fn ablation_csv(rows: &[AblationResult]) -> String {
    let mut s = String::from("row,params,inference_params,game0,game1,game2,game3,rmse\n");
    for r in rows {
        let g = r.table.game;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.name, r.params, r.inference_params, g[0], g[1], g[2], g[3], r.table.rmse
        );
    }
    s
}
