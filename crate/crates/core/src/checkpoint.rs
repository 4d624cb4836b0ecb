//! Structured-text model checkpoints.
//!
//! ```text
//! # rcnnlab checkpoint v1
//! dims <input> <hidden> <classes>
//! head <index> <mode> <ratio> <batch_size> <loss_scale>
//! array <name> <len> <v1> ... <v_len>
//! ```
//!
//! Array names are `backbone.<field>` and `head<i>.<field>`. Values use
//! shortest round-trip formatting, so `load(save(m)) == m` exactly.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::net::{Backbone, Dims, Head, ParamBank};
use crate::prm::{PrmHead, PrmModel};
use crate::sampler::SamplingPolicy;
use crate::scalar::Scalar;

pub const HEADER: &str = "# rcnnlab checkpoint v1";

pub fn save<T: Scalar, W: Write>(mut w: W, model: &PrmModel<T>) -> std::io::Result<()> {
    let d = model.dims();
    writeln!(w, "{HEADER}")?;
    writeln!(w, "dims {} {} {}", d.input, d.hidden, d.classes)?;
    for (i, h) in model.heads.iter().enumerate() {
        let p = h.policy;
        writeln!(w, "head {i} {} {} {} {:?}", p.mode, p.ratio, p.batch_size, h.loss_scale)?;
    }
    let mut write_bank = |prefix: &str, slices: Vec<(&str, &[T])>| -> std::io::Result<()> {
        for (name, s) in slices {
            write!(w, "array {prefix}.{name} {}", s.len())?;
            for v in s {
                write!(w, " {v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    };
    write_bank("backbone", model.backbone.slices())?;
    for (i, h) in model.heads.iter().enumerate() {
        write_bank(&format!("head{i}"), h.params.slices())?;
    }
    Ok(())
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        line,
        msg: msg.into(),
    }
}

fn num<V: std::str::FromStr>(line: usize, s: Option<&str>) -> Result<V> {
    let s = s.ok_or_else(|| err(line, "missing field"))?;
    s.parse().map_err(|_| err(line, format!("bad value {s:?}")))
}

pub fn load<T: Scalar, R: BufRead>(r: R) -> Result<PrmModel<T>> {
    let mut dims: Option<Dims> = None;
    let mut heads: Vec<(SamplingPolicy, T)> = Vec::new();
    let mut arrays: Vec<(usize, String, Vec<T>)> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io("<checkpoint>", e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut f = line.split_whitespace();
        match f.next() {
            Some("dims") => {
                dims = Some(Dims {
                    input: num(n, f.next())?,
                    hidden: num(n, f.next())?,
                    classes: num(n, f.next())?,
                })
            }
            Some("head") => {
                let idx: usize = num(n, f.next())?;
                if idx != heads.len() {
                    return Err(err(n, format!("head {idx} out of order")));
                }
                let mode = num(n, f.next())?;
                let ratio = num(n, f.next())?;
                let batch = num(n, f.next())?;
                let scale = num(n, f.next())?;
                let policy =
                    SamplingPolicy::new(mode, ratio, batch).map_err(|e| err(n, e.to_string()))?;
                heads.push((policy, scale));
            }
            Some("array") => {
                let name = f.next().ok_or_else(|| err(n, "missing array name"))?.to_string();
                let len: usize = num(n, f.next())?;
                let vals = f.map(|s| num(n, Some(s))).collect::<Result<Vec<T>>>()?;
                if vals.len() != len {
                    return Err(err(n, format!("array {name} declares {len} values, has {}", vals.len())));
                }
                arrays.push((n, name, vals));
            }
            Some(other) => return Err(err(n, format!("unknown record {other:?}"))),
            None => unreachable!(),
        }
    }
    let dims = dims.ok_or_else(|| err(0, "missing dims record"))?;
    if heads.is_empty() {
        return Err(err(0, "no heads"));
    }
    let mut model = PrmModel {
        backbone: Backbone::zeros(dims),
        heads: heads
            .into_iter()
            .map(|(policy, loss_scale)| PrmHead {
                params: Head::zeros(dims),
                policy,
                loss_scale,
            })
            .collect(),
    };
    let mut expected: Vec<(String, &mut [T])> = Vec::new();
    for (name, s) in model.backbone.slices_mut() {
        expected.push((format!("backbone.{name}"), s));
    }
    for (i, h) in model.heads.iter_mut().enumerate() {
        for (name, s) in h.params.slices_mut() {
            expected.push((format!("head{i}.{name}"), s));
        }
    }
    if arrays.len() != expected.len() {
        return Err(err(0, format!("expected {} arrays, found {}", expected.len(), arrays.len())));
    }
    for ((line, name, vals), (want, dst)) in arrays.into_iter().zip(expected) {
        if name != want || vals.len() != dst.len() {
            return Err(err(line, format!("expected array {want} of length {}", dst.len())));
        }
        dst.copy_from_slice(&vals);
    }
    Ok(model)
}
