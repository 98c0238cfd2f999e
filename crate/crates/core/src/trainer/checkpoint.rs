use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Method, SusanModels, SusanOptimizers, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::networks::{Network, ParamSet, RNet};
use crate::tensor::io::{self, DType, Entry};
use crate::tensor::{AdamState, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub enum Models<T> {
    Susan(SusanModels<T>),
    Supervised(RNet<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizers<T> {
    Susan(SusanOptimizers<T>),
    Supervised(AdamState<T>),
}

impl<T: Scalar> Models<T> {
    pub fn method(&self) -> Method {
        match self {
            Models::Susan(_) => Method::Susan,
            Models::Supervised(_) => Method::SupervisedBaseline,
        }
    }

    /// `(prefix, parameters)` for every network, in canonical order.
    pub fn named(&self) -> Vec<(&'static str, &ParamSet<T>)> {
        match self {
            Models::Susan(m) => vec![
                ("F", m.f.params()),
                ("B", m.b.params()),
                ("DX", m.d_x.params()),
                ("DY", m.d_y.params()),
            ],
            Models::Supervised(n) => vec![("R", n.params())],
        }
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut ParamSet<T>)> {
        match self {
            Models::Susan(m) => vec![
                ("F", m.f.params_mut()),
                ("B", m.b.params_mut()),
                ("DX", m.d_x.params_mut()),
                ("DY", m.d_y.params_mut()),
            ],
            Models::Supervised(n) => vec![("R", n.params_mut())],
        }
    }

    /// Network that segments the target domain: B, or the baseline itself.
    pub fn target_segmenter(&self) -> &RNet<T> {
        match self {
            Models::Susan(m) => &m.b,
            Models::Supervised(n) => n,
        }
    }

    pub fn entries(&self, prefix: &str) -> Vec<Entry> {
        let dtype = DType::of::<T>();
        self.named()
            .into_iter()
            .flat_map(|(name, p)| p.entries(&format!("{prefix}{name}"), dtype))
            .collect()
    }

    pub fn load_entries(&mut self, prefix: &str, entries: &[Entry]) -> Result<()> {
        for (name, p) in self.named_mut() {
            p.load_entries(&format!("{prefix}{name}"), entries)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Optimizers<T> {
    fn named(&self) -> Vec<(&'static str, &AdamState<T>)> {
        match self {
            Optimizers::Susan(o) => vec![("F", &o.f), ("B", &o.b), ("DX", &o.d_x), ("DY", &o.d_y)],
            Optimizers::Supervised(o) => vec![("R", o)],
        }
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut AdamState<T>)> {
        match self {
            Optimizers::Susan(o) => vec![
                ("F", &mut o.f),
                ("B", &mut o.b),
                ("DX", &mut o.d_x),
                ("DY", &mut o.d_y),
            ],
            Optimizers::Supervised(o) => vec![("R", o)],
        }
    }
}

/// `<path>.txt`, the text sidecar of a tensor file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Full training state on disk: a SUSN file with parameters, Adam moments
/// and the best-so-far networks, plus a `key=value` text sidecar.
pub struct Checkpoint;

impl Checkpoint {
    pub fn save<T: Scalar>(path: &Path, state: &TrainState<T>, config_hash: &str) -> Result<()> {
        let dtype = DType::of::<T>();
        let mut entries = state.models.entries("");
        for (name, opt) in state.optimizers.named() {
            for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                entries.push(Entry::tensor(format!("adam.{name}.m.{i}"), m, dtype));
                entries.push(Entry::tensor(format!("adam.{name}.v.{i}"), v, dtype));
            }
        }
        if let Some((_, _, best)) = &state.best {
            entries.extend(best.entries("best."));
        }
        io::save(path, &entries)?;

        let mut side = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(side, "{k}={v}");
        };
        kv("method", state.models.method().to_string());
        kv("precision", T::NAME.to_string());
        kv("config_hash", config_hash.to_string());
        kv("iteration", state.iteration.to_string());
        kv("target_cursor", state.target_cursor.to_string());
        kv("diverging_for", state.diverging_for.to_string());
        if let Some(v) = state.initial_val {
            kv("initial_val", format!("{v:?}"));
        }
        if let Some((v, it, _)) = &state.best {
            kv("best_val", format!("{v:?}"));
            kv("best_iteration", it.to_string());
        }
        for (name, opt) in state.optimizers.named() {
            kv(&format!("adam_step.{name}"), opt.step.to_string());
        }
        fs::write(sidecar_path(path), side)?;
        Ok(())
    }

    /// Reads the sidecar of a checkpoint.
    pub fn sidecar(path: &Path) -> Result<BTreeMap<String, String>> {
        let p = sidecar_path(path);
        let text = fs::read_to_string(&p).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad sidecar line {line:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        Ok(map)
    }

    /// Restores a state saved by [`Checkpoint::save`]. `cfg` supplies the
    /// architecture; its method and precision must match the file.
    pub fn load<T: Scalar>(path: &Path, cfg: &TrainConfig) -> Result<(TrainState<T>, String)> {
        let side = Self::sidecar(path)?;
        let get = |k: &str| {
            side.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint sidecar lacks {k}")))
        };
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|e| Error::Format(format!("{k}: {e}"))) };
        let real = |k: &str| -> Result<Option<f64>> {
            side.get(k)
                .map(|v| v.parse().map_err(|e| Error::Format(format!("{k}: {e}"))))
                .transpose()
        };
        let method: Method = get("method")?.parse()?;
        if method != cfg.method {
            return Err(Error::Format(format!(
                "checkpoint holds a {method} model, configuration asks for {}",
                cfg.method
            )));
        }
        if get("precision")? != T::NAME {
            return Err(Error::Format(format!(
                "checkpoint precision {} differs from requested {}",
                get("precision")?,
                T::NAME
            )));
        }
        let entries = io::load(path)?;
        let mut state = TrainState::<T>::fresh(cfg)?;
        state.models.load_entries("", &entries)?;
        for (name, opt) in state.optimizers.named_mut() {
            opt.step = num(&format!("adam_step.{name}"))?;
            for i in 0..opt.m.len() {
                for (kind, dst) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                    let key = format!("adam.{name}.{kind}.{i}");
                    let e = entries
                        .iter()
                        .find(|e| e.name == key)
                        .ok_or_else(|| Error::Format(format!("checkpoint is missing {key}")))?;
                    let t = e.to_tensor::<T>()?;
                    if t.shape() != dst.shape() {
                        return Err(Error::Format(format!("{key} has shape {}", t.shape())));
                    }
                    *dst = t;
                }
            }
        }
        state.iteration = num("iteration")?;
        state.target_cursor = num("target_cursor")?;
        state.diverging_for = num("diverging_for")? as usize;
        state.initial_val = real("initial_val")?;
        if let Some(v) = real("best_val")? {
            let mut best = state.models.clone();
            best.load_entries("best.", &entries)?;
            state.best = Some((v, num("best_iteration")?, best));
        }
        Ok((state, get("config_hash")?))
    }

    /// Saves bare networks (no optimizer state).
    pub fn save_models<T: Scalar>(path: &Path, models: &Models<T>, config_hash: &str) -> Result<()> {
        io::save(path, &models.entries(""))?;
        let side = format!(
            "method={}\nprecision={}\nconfig_hash={config_hash}\n",
            models.method(),
            T::NAME
        );
        fs::write(sidecar_path(path), side)?;
        Ok(())
    }

    pub fn load_models<T: Scalar>(path: &Path, cfg: &TrainConfig) -> Result<(Models<T>, String)> {
        let side = Self::sidecar(path)?;
        let method: Method = side
            .get("method")
            .ok_or_else(|| Error::Format("model sidecar lacks method".into()))?
            .parse()?;
        let cfg = TrainConfig {
            method,
            ..cfg.clone()
        };
        let mut models = TrainState::<T>::fresh(&cfg)?.models;
        models.load_entries("", &io::load(path)?)?;
        Ok((models, side.get("config_hash").cloned().unwrap_or_default()))
    }
}
