use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Protocol, Scenario};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    None,
    Xdg,
    Ewc,
    Oewc,
    Si,
    Lwf,
    Dgr,
    DgrDistill,
    Rtf,
    Offline,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::None,
        Method::Xdg,
        Method::Ewc,
        Method::Oewc,
        Method::Si,
        Method::Lwf,
        Method::Dgr,
        Method::DgrDistill,
        Method::Rtf,
        Method::Offline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Xdg => "xdg",
            Method::Ewc => "ewc",
            Method::Oewc => "oewc",
            Method::Si => "si",
            Method::Lwf => "lwf",
            Method::Dgr => "dgr",
            Method::DgrDistill => "dgr-distill",
            Method::Rtf => "rtf",
            Method::Offline => "offline",
        }
    }

    /// Name used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::None => "None",
            Method::Xdg => "XdG",
            Method::Ewc => "EWC",
            Method::Oewc => "Online EWC",
            Method::Si => "SI",
            Method::Lwf => "LwF",
            Method::Dgr => "DGR",
            Method::DgrDistill => "DGR+distill",
            Method::Rtf => "RtF",
            Method::Offline => "Offline",
        }
    }

    /// Methods that train a separate generator.
    pub fn has_generator(self) -> bool {
        matches!(self, Method::Dgr | Method::DgrDistill)
    }

    /// Methods that keep a frozen copy of the previous model.
    pub fn replays(self) -> bool {
        matches!(self, Method::Lwf | Method::Dgr | Method::DgrDistill | Method::Rtf)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Method hyperparameters. Each method reads only its own fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    /// Penalty strength for EWC and online EWC.
    pub lambda: f64,
    /// Decay of earlier Fisher estimates in online EWC.
    pub gamma: f64,
    /// Penalty strength for SI.
    pub si_c: f64,
    /// Damping of SI's importance normalization.
    pub si_xi: f64,
    /// Percentage of hidden units gated per task for XdG.
    pub xdg_pct: f64,
    /// Number of examples for the Fisher estimate (all when unset).
    pub n_fisher: Option<usize>,
    /// Distillation temperature.
    pub temperature: f32,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lambda: 5000.0,
            gamma: 1.0,
            si_c: 1.0,
            si_xi: crate::regularizers::SI_XI,
            xdg_pct: 80.0,
            n_fisher: None,
            temperature: crate::losses::DISTILL_TEMPERATURE,
        }
    }
}

/// Everything that determines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub scenario: Scenario,
    pub method: Method,
    pub seed: u64,
    pub n_tasks: usize,
    pub iters: usize,
    pub lr: f32,
    pub batch: usize,
    pub replay_batch: usize,
    pub hidden: usize,
    pub hyper: Hyper,
}

impl RunConfig {
    /// Defaults: split runs 5 tasks of 2000 iterations at learning rate
    /// 0.001 with 400 hidden units; permuted runs 10 tasks of 5000
    /// iterations at 0.0001 with 1000 hidden units.
    pub fn new(protocol: Protocol, scenario: Scenario, method: Method, seed: u64) -> Self {
        let (n_tasks, iters, lr, hidden) = match protocol {
            Protocol::Split => (5, 2000, 0.001, 400),
            Protocol::Permuted => (10, 5000, 0.0001, 1000),
        };
        Self {
            protocol,
            scenario,
            method,
            seed,
            n_tasks,
            iters,
            lr,
            batch: 128,
            replay_batch: 128,
            hidden,
            hyper: Hyper::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.method == Method::Xdg && self.scenario != Scenario::Task {
            return bad(format!("xdg needs task identity and only runs in the task scenario, not {}", self.scenario));
        }
        if self.protocol == Protocol::Split && self.n_tasks != 5 {
            return bad(format!("split protocol has 5 tasks, not {}", self.n_tasks));
        }
        if self.n_tasks == 0 || self.iters == 0 || self.batch == 0 || self.hidden == 0 {
            return bad("tasks, iterations, batch size and hidden width must be positive".into());
        }
        if self.method.replays() && self.method != Method::Lwf && self.replay_batch == 0 {
            return bad("replay batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        let h = &self.hyper;
        if !(h.lambda >= 0.0 && h.si_c >= 0.0) {
            return bad("penalty strengths must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&h.gamma) {
            return bad(format!("gamma {} outside [0, 1]", h.gamma));
        }
        if !(0.0..100.0).contains(&h.xdg_pct) {
            return bad(format!("xdg percentage {} outside [0, 100)", h.xdg_pct));
        }
        if !(h.temperature > 0.0) || !(h.si_xi > 0.0) {
            return bad("temperature and xi must be positive".into());
        }
        if h.n_fisher == Some(0) {
            return bad("n_fisher must be positive".into());
        }
        Ok(())
    }

    /// Short identifier used in file names.
    pub fn tag(&self) -> String {
        format!("{}-{}-{}-s{}", self.protocol, self.scenario, self.method, self.seed)
    }
}

/// Optional overrides read from a key-value configuration file; keys mirror
/// the command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConfigFile {
    pub protocol: Option<Protocol>,
    pub scenario: Option<Scenario>,
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub seeds: Option<usize>,
    pub tasks: Option<usize>,
    pub iters: Option<usize>,
    pub lr: Option<f32>,
    pub batch: Option<usize>,
    pub replay_batch: Option<usize>,
    pub hidden: Option<usize>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub si_c: Option<f64>,
    pub xdg_pct: Option<f64>,
    pub n_fisher: Option<usize>,
    pub temperature: Option<f32>,
    pub data_dir: Option<std::path::PathBuf>,
    pub out_dir: Option<std::path::PathBuf>,
    pub jobs: Option<usize>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::parse(&text)
    }

    /// Applies the numeric overrides to `config`.
    pub fn apply(&self, config: &mut RunConfig) {
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = self.$src.clone() {
                    config.$($dst)+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(tasks => n_tasks);
        set!(iters => iters);
        set!(lr => lr);
        set!(batch => batch);
        set!(replay_batch => replay_batch);
        set!(hidden => hidden);
        set!(lambda => hyper.lambda);
        set!(gamma => hyper.gamma);
        set!(si_c => hyper.si_c);
        set!(xdg_pct => hyper.xdg_pct);
        set!(temperature => hyper.temperature);
        if self.n_fisher.is_some() {
            config.hyper.n_fisher = self.n_fisher;
        }
    }
}
