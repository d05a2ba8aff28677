//! Flat `key = value` text files for calibrated parameters and run configs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::futures::{GabillonParams, THETA_NAMES};
use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::spot::{GarchParams, SpikeParams, SpotModel, SpotParams};

/// Ordered key-value pairs. Blank lines and `#` comments are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing key {key:?}")))
    }

    pub fn parsed<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|s| s.parse::<V>().map_err(|e| Error::Config(format!("{key} = {s:?}: {e}"))))
            .transpose()
    }

    pub fn real<T: Real>(&self, key: &str) -> Result<T> {
        let v: f64 = self
            .parsed(key)?
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))?;
        Ok(T::lit(v))
    }

    pub fn reals<T: Real>(&self, key: &str) -> Result<Vec<T>> {
        self.require(key)?
            .split([',', ' '])
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map(T::lit)
                    .map_err(|e| Error::Config(format!("{key}: {s:?}: {e}")))
            })
            .collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.map {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn num<T: Real>(v: T) -> String {
    format!("{:?}", v.f64())
}

fn join<T: Real>(vs: &[T]) -> String {
    vs.iter().map(|&v| num(v)).collect::<Vec<_>>().join(" ")
}

fn put_covariance<T: Real>(kv: &mut KeyValues, cov: &Matrix<T>) {
    let vals: Vec<T> = (0..cov.rows()).flat_map(|r| cov.row(r).to_vec()).collect();
    kv.set("covariance", join(&vals));
}

fn get_covariance<T: Real>(kv: &KeyValues) -> Result<Option<Matrix<T>>> {
    if !kv.contains("covariance") {
        return Ok(None);
    }
    let v: Vec<T> = kv.reals("covariance")?;
    if v.len() != 36 {
        return Err(Error::Config(format!("covariance needs 36 entries, got {}", v.len())));
    }
    let rows: Vec<Vec<T>> = v.chunks(6).map(<[T]>::to_vec).collect();
    Ok(Some(Matrix::from_rows(&rows)))
}

pub fn futures_to_kv<T: Real>(p: &GabillonParams<T>, cov: Option<&Matrix<T>>) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.set("kind", "futures");
    kv.set("lambda", num(p.lambda));
    kv.set("mu1", num(p.mu1));
    kv.set("mu2", num(p.mu2));
    kv.set("t1", num(p.t1));
    kv.set("t2", num(p.t2));
    kv.set("sigma_s", num(p.sigma_s));
    kv.set("sigma_l", num(p.sigma_l));
    kv.set("rho", num(p.rho));
    if let Some(c) = cov {
        kv.set("covariance_order", THETA_NAMES.join(" "));
        put_covariance(&mut kv, c);
    }
    kv
}

pub fn futures_from_kv<T: Real>(kv: &KeyValues) -> Result<(GabillonParams<T>, Option<Matrix<T>>)> {
    if let Some(k) = kv.get("kind") {
        if k != "futures" {
            return Err(Error::Config(format!("expected futures parameters, found kind = {k}")));
        }
    }
    let p = GabillonParams {
        lambda: kv.real("lambda")?,
        mu1: kv.real("mu1")?,
        mu2: kv.real("mu2")?,
        t1: kv.real("t1")?,
        t2: kv.real("t2")?,
        sigma_s: kv.real("sigma_s")?,
        sigma_l: kv.real("sigma_l")?,
        rho: kv.real("rho")?,
    };
    p.validate()?;
    Ok((p, get_covariance(kv)?))
}

fn put_spike<T: Real>(kv: &mut KeyValues, prefix: &str, s: &SpikeParams<T>) {
    kv.set(&format!("{prefix}.beta"), num(s.beta));
    kv.set(&format!("{prefix}.intensity"), num(s.intensity));
    kv.set(&format!("{prefix}.jump_mean"), num(s.jump_mean));
    kv.set(&format!("{prefix}.jump_std"), num(s.jump_std));
    kv.set(
        &format!("{prefix}.window"),
        s.window.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
    );
}

fn get_spike<T: Real>(kv: &KeyValues, prefix: &str) -> Result<SpikeParams<T>> {
    let key = format!("{prefix}.window");
    let window = kv
        .require(&key)?
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>().map_err(|e| Error::Config(format!("{key}: {s:?}: {e}"))))
        .collect::<Result<Vec<u32>>>()?;
    Ok(SpikeParams {
        beta: kv.real(&format!("{prefix}.beta"))?,
        intensity: kv.real(&format!("{prefix}.intensity"))?,
        jump_mean: kv.real(&format!("{prefix}.jump_mean"))?,
        jump_std: kv.real(&format!("{prefix}.jump_std"))?,
        window,
    })
}

pub fn spot_to_kv<T: Real>(p: &SpotParams<T>, cov: Option<&Matrix<T>>) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.set("kind", "spot");
    kv.set("model", p.model.id());
    kv.set("a1", num(p.a1));
    kv.set("a2", num(p.a2));
    kv.set("a3", num(p.a3));
    kv.set("kappa", num(p.garch.kappa));
    kv.set("gamma", join(&p.garch.gamma));
    kv.set("alpha", join(&p.garch.alpha));
    put_spike(&mut kv, "spike_pos", &p.spike_pos);
    put_spike(&mut kv, "spike_neg", &p.spike_neg);
    if let Some(c) = cov {
        kv.set("covariance_order", crate::spot::SPOT_THETA_NAMES.join(" "));
        put_covariance(&mut kv, c);
    }
    kv
}

pub fn spot_from_kv<T: Real>(kv: &KeyValues) -> Result<(SpotParams<T>, Option<Matrix<T>>)> {
    if let Some(k) = kv.get("kind") {
        if k != "spot" {
            return Err(Error::Config(format!("expected spot parameters, found kind = {k}")));
        }
    }
    let model: u8 = kv.parsed("model")?.ok_or_else(|| Error::Config("missing key \"model\"".into()))?;
    let p = SpotParams {
        model: SpotModel::from_id(model)?,
        a1: kv.real("a1")?,
        a2: kv.real("a2")?,
        a3: kv.real("a3")?,
        garch: GarchParams {
            kappa: kv.real("kappa")?,
            gamma: kv.reals("gamma")?,
            alpha: kv.reals("alpha")?,
        },
        spike_pos: get_spike(kv, "spike_pos")?,
        spike_neg: get_spike(kv, "spike_neg")?,
    };
    p.validate()?;
    Ok((p, get_covariance(kv)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_rejects_malformed() {
        assert!(KeyValues::parse("a = 1\nb\n").is_err());
        assert!(KeyValues::parse("a = 1\na = 2\n").is_err());
        let kv = KeyValues::parse("# header\n a = 1 # trailing\n\nb=x y\n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("x y"));
    }

    #[test]
    fn futures_round_trip() {
        let p = GabillonParams::<f64>::reference();
        let cov = Matrix::from_diagonal(&[1e-3, 2e-4, 3e-5, 4e-6, 5e-7, 6e-8]);
        let text = futures_to_kv(&p, Some(&cov)).to_text();
        let (q, c) = futures_from_kv::<f64>(&KeyValues::parse(&text).unwrap()).unwrap();
        assert_eq!(p, q);
        assert_eq!(c.as_ref().unwrap().diagonal(), cov.diagonal());
        assert_eq!(futures_to_kv(&q, c.as_ref()).to_text(), text);
    }

    #[test]
    fn spot_round_trip() {
        let p = SpotParams::<f64>::default_model2();
        let text = spot_to_kv(&p, None).to_text();
        let (q, c) = spot_from_kv::<f64>(&KeyValues::parse(&text).unwrap()).unwrap();
        assert_eq!(p, q);
        assert!(c.is_none());
    }

    #[test]
    fn wrong_kind_rejected() {
        let text = spot_to_kv(&SpotParams::<f64>::reference_model1(), None).to_text();
        assert!(futures_from_kv::<f64>(&KeyValues::parse(&text).unwrap()).is_err());
    }
}
