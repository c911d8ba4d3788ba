//! Run configuration: a JSON file plus command-line overrides.

use std::path::PathBuf;

use jomi::harness::dgp::Dgp;
use jomi::harness::runner::Experiment;
use jomi::pipeline::{Method, Pipeline, RuleSpec, TaxonomySpec};
use jomi::report::Assertion;
use jomi::ScoreFamily;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::Args;

fn default_methods() -> Vec<Method> {
    vec![Method::Jomi]
}

fn default_family() -> ScoreFamily {
    ScoreFamily::AbsResidual
}

fn default_alphas() -> Vec<f64> {
    vec![0.1]
}

fn default_trials() -> usize {
    100
}

fn default_oracle_instances() -> usize {
    20
}

/// Every key of a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    pub rule: RuleSpec,
    #[serde(default)]
    pub taxonomy: TaxonomySpec,
    /// Second-stage score family; the first-stage family of prelim rules
    /// lives in the rule.
    #[serde(default = "default_family")]
    pub family: ScoreFamily,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub dgp: Option<Dgp>,
    #[serde(default)]
    pub calib: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Per-unit detail CSV written by `evaluate`.
    #[serde(default)]
    pub detail: Option<PathBuf>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
    #[serde(default = "default_oracle_instances")]
    pub oracle_instances: usize,
}

/// Where the data of a run comes from.
pub enum Source<'a> {
    Dgp {
        dgp: &'a Dgp,
        n: usize,
        m: usize,
    },
    Files {
        calib: &'a PathBuf,
        test: &'a PathBuf,
    },
}

impl RunConfig {
    /// Merges the overrides into the file contents and parses the result.
    pub fn load(args: &Args) -> anyhow::Result<Self> {
        let mut value = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?
            }
            None => Value::Object(Map::new()),
        };
        let obj = value
            .as_object_mut()
            .ok_or_else(|| anyhow::anyhow!("config must be a JSON object"))?;
        let json = |text: &str, key: &str| -> anyhow::Result<Value> {
            serde_json::from_str(text).map_err(|e| anyhow::anyhow!("--{key}: {e}"))
        };
        if !args.method.is_empty() {
            obj.insert("methods".into(), serde_json::to_value(&args.method)?);
        }
        if let Some(r) = &args.rule {
            obj.insert("rule".into(), json(r, "rule")?);
        }
        let rule_overrides = [
            ("k", args.k.map(Value::from)),
            ("q", args.q.map(Value::from)),
            ("budget", args.budget.map(Value::from)),
            ("beta", args.beta.map(Value::from)),
        ];
        for (key, v) in rule_overrides {
            if let Some(v) = v {
                let rule = obj
                    .get_mut("rule")
                    .and_then(Value::as_object_mut)
                    .ok_or_else(|| anyhow::anyhow!("--{key} needs a rule"))?;
                rule.insert(key.into(), v);
            }
        }
        if let Some(t) = &args.taxonomy {
            let v = serde_json::from_str(t).unwrap_or_else(|_| serde_json::json!({ "kind": t }));
            obj.insert("taxonomy".into(), v);
        }
        if let Some(f) = &args.family {
            obj.insert("family".into(), Value::from(f.clone()));
        }
        if !args.alpha.is_empty() {
            obj.insert("alphas".into(), serde_json::to_value(&args.alpha)?);
        }
        let scalars = [
            ("n", args.n.map(Value::from)),
            ("m", args.m.map(Value::from)),
            ("trials", args.trials.map(Value::from)),
            ("master_seed", args.seed.map(Value::from)),
            ("oracle_instances", args.oracle_instances.map(Value::from)),
        ];
        for (key, v) in scalars {
            if let Some(v) = v {
                obj.insert(key.into(), v);
            }
        }
        if let Some(d) = &args.dgp {
            obj.insert("dgp".into(), json(d, "dgp")?);
        }
        let paths = [
            ("calib", &args.calib),
            ("test", &args.test),
            ("output", &args.output),
            ("detail", &args.detail),
        ];
        for (key, p) in paths {
            if let Some(p) = p {
                obj.insert(key.into(), Value::from(p.to_string_lossy().into_owned()));
            }
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| anyhow::anyhow!("invalid configuration: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.methods.is_empty() {
            anyhow::bail!("at least one method is required");
        }
        if self.alphas.is_empty() {
            anyhow::bail!("at least one alpha is required");
        }
        for &a in &self.alphas {
            jomi::error::check_alpha(a)?;
        }
        for m in &self.methods {
            m.check_rule(&self.rule)?;
        }
        if let Source::Dgp { dgp, n, m } = self.source()? {
            dgp.validate()?;
            self.rule.validate(n, m)?;
        }
        Ok(())
    }

    pub fn source(&self) -> anyhow::Result<Source<'_>> {
        match (&self.dgp, &self.calib, &self.test) {
            (Some(dgp), None, None) => match (self.n, self.m) {
                (Some(n), Some(m)) if n > 0 && m > 0 => Ok(Source::Dgp { dgp, n, m }),
                _ => anyhow::bail!("a dgp run needs positive `n` and `m`"),
            },
            (None, Some(calib), Some(test)) => Ok(Source::Files { calib, test }),
            (None, _, _) => anyhow::bail!("give either `dgp` or both `calib` and `test`"),
            _ => anyhow::bail!("`dgp` and input files are mutually exclusive"),
        }
    }

    pub fn pipeline(&self) -> Pipeline {
        Pipeline {
            rule: self.rule.clone(),
            taxonomy: self.taxonomy.clone(),
            family: self.family,
        }
    }

    pub fn experiment(&self, dgp: &Dgp, n: usize, m: usize) -> Experiment {
        Experiment {
            dgp: dgp.clone(),
            pipeline: self.pipeline(),
            methods: self.methods.clone(),
            alphas: self.alphas.clone(),
            n,
            m,
            trials: self.trials,
            master_seed: self.master_seed,
            keep_sets: false,
        }
    }
}
