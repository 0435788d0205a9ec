//! Plain-text `key = value` files and their typed readers/writers.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_complex::Complex64;

use crate::analytic::PerturbationCoeffs;
use crate::error::{Result, TrapError};
use crate::geometry::{DefectSet, ElectrodeLayout, TrapConfig};

/// Formats with 12 significant digits; the text survives a parse/format cycle unchanged.
pub fn fmt_num(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{}", if v == 0.0 { 0.0 } else { v });
    }
    let mag = v.abs().log10().floor() as i32;
    let s = if (-4..12).contains(&mag) {
        format!("{:.*}", (11 - mag).max(0) as usize, v)
    } else {
        format!("{:.11e}", v)
    };
    let (mant, exp) = match s.split_once('e') {
        Some((m, e)) => (m.to_string(), format!("e{e}")),
        None => (s.clone(), String::new()),
    };
    let mant = if mant.contains('.') {
        mant.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        mant
    };
    format!("{mant}{exp}")
}

/// Ordered key-value document; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrapError::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(TrapError::Parse(format!("line {}: empty key", n + 1)));
            }
            if entries.iter().any(|(e, _)| *e == k) {
                return Err(TrapError::Parse(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            entries.push((k, v.trim().to_string()));
        }
        Ok(KeyValues { entries })
    }

    pub fn push(&mut self, key: &str, value: impl Into<String>) {
        self.entries.push((key.to_string(), value.into()));
    }

    pub fn push_num(&mut self, key: &str, value: f64) {
        self.push(key, fmt_num(value));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn num(&self, key: &str) -> Result<f64> {
        let v = self.get(key).ok_or_else(|| TrapError::Parse(format!("missing key `{key}`")))?;
        v.parse::<f64>().map_err(|_| TrapError::Parse(format!("`{key}`: not a number: {v}")))
    }

    pub fn num_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            Some(_) => self.num(key),
            None => Ok(default),
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries.iter().cloned().collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

pub fn write_layout(layout: &ElectrodeLayout, r0: f64) -> String {
    let mut kv = KeyValues::default();
    kv.push_num("r0_mm", r0 * 1e3);
    kv.push_num("rd_mm", layout.rd * 1e3);
    for (k, c) in layout.centers.iter().enumerate() {
        kv.push_num(&format!("electrode{k}_x_mm"), c.re * 1e3);
        kv.push_num(&format!("electrode{k}_y_mm"), c.im * 1e3);
    }
    for (k, a) in layout.amplitudes.iter().enumerate() {
        kv.push_num(&format!("electrode{k}_amp_V"), *a);
    }
    kv.render()
}

/// Reads a layout file; returns the layout and `r0`. Missing amplitudes default to `v_rf`.
pub fn read_layout(text: &str, v_rf: f64) -> Result<(ElectrodeLayout, f64)> {
    let kv = KeyValues::parse(text)?;
    let r0 = kv.num("r0_mm")? * 1e-3;
    let rd = kv.num("rd_mm")? * 1e-3;
    let mut centers = [Complex64::new(0.0, 0.0); 8];
    let mut amps = [v_rf; 8];
    for k in 0..8 {
        centers[k] = Complex64::new(
            kv.num(&format!("electrode{k}_x_mm"))? * 1e-3,
            kv.num(&format!("electrode{k}_y_mm"))? * 1e-3,
        );
        amps[k] = kv.num_or(&format!("electrode{k}_amp_V"), v_rf)?;
    }
    let layout = ElectrodeLayout::new(centers, rd, v_rf)?.with_amplitudes(amps);
    Ok((layout, r0))
}

fn defect_key(name: &str) -> String {
    match name {
        "beta_s" | "beta_t" | "delta" => format!("{name}_mrad"),
        "r_bar0" | "delta_r" => format!("{name}_mm"),
        _ => name.to_string(),
    }
}

fn defect_scale(name: &str) -> f64 {
    match name {
        "beta_s" | "beta_t" | "delta" | "r_bar0" | "delta_r" => 1e3,
        _ => 1.0,
    }
}

pub fn write_defects(d: &DefectSet) -> String {
    let mut kv = KeyValues::default();
    for (name, v) in DefectSet::NAMES.iter().zip(d.to_array()) {
        kv.push_num(&defect_key(name), v * defect_scale(name));
    }
    kv.render()
}

/// Reads a defect file. Missing entries are zero, except `r_bar0` which defaults to `cfg.r0`.
pub fn read_defects(text: &str, cfg: &TrapConfig) -> Result<DefectSet> {
    let kv = KeyValues::parse(text)?;
    let mut d = DefectSet::ideal(cfg.r0);
    for name in DefectSet::NAMES {
        let key = defect_key(name);
        if kv.get(&key).is_some() {
            d.set(name, kv.num(&key)? / defect_scale(name))?;
        }
    }
    for key in kv.keys() {
        if !DefectSet::NAMES.iter().any(|n| defect_key(n) == key) {
            return Err(TrapError::Parse(format!("unknown defect key `{key}`")));
        }
    }
    Ok(d)
}

pub fn write_coeffs(c: &PerturbationCoeffs) -> String {
    let mut kv = KeyValues::default();
    for (i, a) in c.a.iter().enumerate() {
        kv.push_num(&format!("a{}", i + 1), *a);
    }
    kv.push_num("h0", c.h0);
    kv.push_num("r_bar0_mm", c.r_bar0 * 1e3);
    kv.render()
}

pub fn read_coeffs(text: &str) -> Result<PerturbationCoeffs> {
    let kv = KeyValues::parse(text)?;
    Ok(PerturbationCoeffs {
        a: [kv.num("a1")?, kv.num("a2")?, kv.num("a3")?, kv.num("a4")?],
        h0: kv.num("h0")?,
        r_bar0: kv.num("r_bar0_mm")? * 1e-3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{layout_from_defects, random_layout};

    #[test]
    fn number_format_is_stable() {
        for v in [0.0, 1.0, -5.5, 1.0 / 3.0, 1e-7, 123456.789012345, -2.5e-12] {
            let s = fmt_num(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(fmt_num(back), s);
            assert!((back - v).abs() <= 1e-11 * v.abs());
        }
        assert_eq!(fmt_num(5.5), "5.5");
    }

    #[test]
    fn parse_comments_and_errors() {
        let kv = KeyValues::parse("# header\na = 1 # trailing\n\nb=2.5\n").unwrap();
        assert_eq!(kv.num("a").unwrap(), 1.0);
        assert_eq!(kv.num("b").unwrap(), 2.5);
        assert!(KeyValues::parse("a 1").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(kv.num("c").is_err());
    }

    #[test]
    fn layout_file_round_trip() {
        let cfg = TrapConfig::default();
        let l = random_layout(11, 0.02, &cfg).unwrap();
        let text = write_layout(&l, cfg.r0);
        let (back, r0) = read_layout(&text, cfg.v_rf).unwrap();
        assert_eq!(write_layout(&back, r0), text);
        for k in 0..8 {
            assert!((back.centers[k] - l.centers[k]).norm() < 1e-14);
        }
    }

    #[test]
    fn defect_file_round_trip() {
        let cfg = TrapConfig::default();
        let d = DefectSet { l_s: 0.03, beta_t: 0.05, delta: -0.02, y0: 0.01, ..DefectSet::ideal(4e-3) };
        let text = write_defects(&d);
        assert!(text.contains("beta_t_mrad = 50"));
        let back = read_defects(&text, &cfg).unwrap();
        assert_eq!(write_defects(&back), text);
        assert!(layout_from_defects(&back, &cfg).is_ok());
        assert!(read_defects("bogus = 1", &cfg).is_err());
    }

    #[test]
    fn coeff_file_round_trip() {
        let c = PerturbationCoeffs { a: [0.05, -0.02, 0.03, 0.01], h0: -1.0178, r_bar0: 4e-3 };
        let text = write_coeffs(&c);
        let back = read_coeffs(&text).unwrap();
        assert_eq!(write_coeffs(&back), text);
        assert_eq!(back.a, c.a);
    }
}
