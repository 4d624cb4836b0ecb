//! Line-delimited dataset files.
//!
//! One record per scene: a `scene` header followed by one `gt` line per
//! instance and one `prop` line per proposal. Fields are space separated and
//! floats use shortest round-trip formatting, so reading a written file
//! reproduces it exactly. Lines starting with `#` are comments.
//!
//! ```text
//! scene <id> <width> <height> <n_instances> <n_proposals>
//! gt <class> <x1> <y1> <x2> <y2>
//! prop <x1> <y1> <x2> <y2> <class> <max_iou> <matched|-> <nearest|-> <tx> <ty> <tw> <th> <dim> <f1> .. <f_dim>
//! ```
//!
//! The four regression fields are `-` for background proposals.

use std::io::{BufRead, Write};

use super::{Proposal, Scene};
use crate::error::{Error, Result};
use crate::geometry::{BBox, GroundTruthInstance, ProposalLabel};

pub const HEADER: &str = "# rcnnlab dataset v1";

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene: Scene,
    pub proposals: Vec<Proposal>,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

pub fn write_dataset<W: Write>(mut w: W, records: &[SceneRecord]) -> std::io::Result<()> {
    writeln!(w, "{HEADER}")?;
    for rec in records {
        let s = &rec.scene;
        writeln!(
            w,
            "scene {} {:?} {:?} {} {}",
            s.id,
            s.extent.0,
            s.extent.1,
            s.instances.len(),
            rec.proposals.len()
        )?;
        for g in &s.instances {
            let [x1, y1, x2, y2] = g.bbox.corners();
            writeln!(w, "gt {} {x1:?} {y1:?} {x2:?} {y2:?}", g.class_id())?;
        }
        for p in &rec.proposals {
            let [x1, y1, x2, y2] = p.bbox.corners();
            let l = &p.label;
            write!(
                w,
                "prop {x1:?} {y1:?} {x2:?} {y2:?} {} {:?} {} {}",
                l.class_id,
                l.max_iou,
                opt(l.matched_gt),
                opt(l.nearest_class)
            )?;
            match l.regression_target {
                Some(t) => write!(w, " {:?} {:?} {:?} {:?}", t[0], t[1], t[2], t[3])?,
                None => write!(w, " - - - -")?,
            }
            write!(w, " {}", p.feature.len())?;
            for f in &p.feature {
                write!(w, " {f:?}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

struct Fields<'a> {
    line: usize,
    it: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            what: "dataset",
            line: self.line,
            msg: msg.into(),
        }
    }

    fn raw(&mut self) -> Result<&'a str> {
        let line = self.line;
        self.it.next().ok_or(Error::Format {
            what: "dataset",
            line,
            msg: "missing field".into(),
        })
    }

    fn parse<T: std::str::FromStr>(&mut self) -> Result<T> {
        let s = self.raw()?;
        s.parse().map_err(|_| self.err(format!("bad value {s:?}")))
    }

    fn parse_opt<T: std::str::FromStr>(&mut self) -> Result<Option<T>> {
        match self.raw()? {
            "-" => Ok(None),
            s => s
                .parse()
                .map(Some)
                .map_err(|_| self.err(format!("bad value {s:?}"))),
        }
    }

    fn bbox(&mut self) -> Result<BBox<f64>> {
        let c: [f64; 4] = [self.parse()?, self.parse()?, self.parse()?, self.parse()?];
        BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| self.err(e.to_string()))
    }

    fn done(&mut self) -> Result<()> {
        match self.it.next() {
            None => Ok(()),
            Some(extra) => Err(self.err(format!("unexpected trailing field {extra:?}"))),
        }
    }
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<SceneRecord>> {
    let mut records: Vec<SceneRecord> = Vec::new();
    let mut pending = (0usize, 0usize);
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut f = Fields {
            line: line_no,
            it: trimmed.split_whitespace(),
        };
        match f.raw()? {
            "scene" => {
                if pending != (0, 0) {
                    return Err(f.err("previous scene record is incomplete"));
                }
                let id = f.parse()?;
                let extent = (f.parse()?, f.parse()?);
                pending = (f.parse()?, f.parse()?);
                f.done()?;
                records.push(SceneRecord {
                    scene: Scene {
                        id,
                        extent,
                        instances: Vec::with_capacity(pending.0),
                    },
                    proposals: Vec::with_capacity(pending.1),
                });
            }
            "gt" => {
                let rec = records.last_mut().ok_or_else(|| f.err("gt before scene"))?;
                if pending.0 == 0 {
                    return Err(f.err("more instances than declared"));
                }
                let class = f.parse()?;
                let bbox = f.bbox()?;
                f.done()?;
                rec.scene.instances.push(
                    GroundTruthInstance::new(bbox, class).map_err(|e| f.err(e.to_string()))?,
                );
                pending.0 -= 1;
            }
            "prop" => {
                let rec = records.last_mut().ok_or_else(|| f.err("prop before scene"))?;
                if pending.0 != 0 || pending.1 == 0 {
                    return Err(f.err("proposal out of place"));
                }
                let bbox = f.bbox()?;
                let class_id = f.parse()?;
                let max_iou = f.parse()?;
                let matched_gt = f.parse_opt()?;
                let nearest_class = f.parse_opt()?;
                let t: [Option<f64>; 4] =
                    [f.parse_opt()?, f.parse_opt()?, f.parse_opt()?, f.parse_opt()?];
                let regression_target = match t {
                    [Some(a), Some(b), Some(c), Some(d)] => Some([a, b, c, d]),
                    [None, None, None, None] => None,
                    _ => return Err(f.err("partial regression target")),
                };
                let dim: usize = f.parse()?;
                let feature = (0..dim).map(|_| f.parse()).collect::<Result<Vec<f64>>>()?;
                f.done()?;
                rec.proposals.push(Proposal {
                    bbox,
                    feature,
                    label: ProposalLabel {
                        class_id,
                        max_iou,
                        matched_gt,
                        nearest_class,
                        regression_target,
                    },
                });
                pending.1 -= 1;
            }
            other => return Err(f.err(format!("unknown record kind {other:?}"))),
        }
    }
    if pending != (0, 0) {
        return Err(Error::Format {
            what: "dataset",
            line: 0,
            msg: "file ends inside a scene record".into(),
        });
    }
    Ok(records)
}
