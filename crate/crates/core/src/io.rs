//! Text formats for problems and solutions, and PLY export.
//!
//! Both formats start with a magic line and a version line, followed by
//! `key value` header lines and one record per line. Reals are written in the
//! shortest form that parses back to the same bits.
//!
//! Problem:
//!
//! ```text
//! rotpose-problem
//! version 1
//! n_cams 2
//! n_pts 8
//! eta 5e-2
//! include_rot 1
//! include_diag 0
//! observations 16
//! o <cam> <pt> <m_x> <m_y>
//! priors 3
//! p <k> <l> <9 entries of R~, row-major> <81 entries of sqrt(W), row-major>
//! end
//! ```
//!
//! Solution:
//!
//! ```text
//! rotpose-solution
//! version 1
//! n_cams 2
//! n_pts 8
//! c <i> <9 entries of a_i, row-major> <3 entries of t_i>
//! u <j> <x> <y> <z>
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Mat3, RotationMatrix, Vec2, Vec3};
use crate::objective::{Mat9, ObjectiveConfig, Observation, Problem, RotationPrior, Variables};

pub const PROBLEM_MAGIC: &str = "rotpose-problem";
pub const SOLUTION_MAGIC: &str = "rotpose-solution";
pub const FORMAT_VERSION: u32 = 1;

fn real(out: &mut String, x: f64) {
    write!(out, " {x:e}").expect("writing to a string");
}

pub fn write_problem(prob: &Problem) -> String {
    let mut s = String::new();
    let cfg = &prob.config;
    writeln!(s, "{PROBLEM_MAGIC}").unwrap();
    writeln!(s, "version {FORMAT_VERSION}").unwrap();
    writeln!(s, "n_cams {}", prob.n_cams).unwrap();
    writeln!(s, "n_pts {}", prob.n_pts).unwrap();
    writeln!(s, "eta {:e}", cfg.eta).unwrap();
    writeln!(s, "include_rot {}", cfg.include_rot as u8).unwrap();
    writeln!(s, "include_diag {}", cfg.include_diag as u8).unwrap();
    writeln!(s, "observations {}", prob.observations.len()).unwrap();
    for o in &prob.observations {
        write!(s, "o {} {}", o.cam, o.pt).unwrap();
        real(&mut s, o.m.x);
        real(&mut s, o.m.y);
        s.push('\n');
    }
    writeln!(s, "priors {}", prob.priors.len()).unwrap();
    for p in &prob.priors {
        write!(s, "p {} {}", p.k, p.l).unwrap();
        let r = p.r_tilde.matrix();
        for a in 0..3 {
            for b in 0..3 {
                real(&mut s, r[(a, b)]);
            }
        }
        for a in 0..9 {
            for b in 0..9 {
                real(&mut s, p.w_sqrt[(a, b)]);
            }
        }
        s.push('\n');
    }
    s.push_str("end\n");
    s
}

pub fn write_solution(vars: &Variables) -> String {
    let mut s = String::new();
    writeln!(s, "{SOLUTION_MAGIC}").unwrap();
    writeln!(s, "version {FORMAT_VERSION}").unwrap();
    writeln!(s, "n_cams {}", vars.n_cams()).unwrap();
    writeln!(s, "n_pts {}", vars.n_pts()).unwrap();
    for (i, (a, t)) in vars.b.iter().zip(&vars.t).enumerate() {
        write!(s, "c {i}").unwrap();
        for r in 0..3 {
            for c in 0..3 {
                real(&mut s, a[(r, c)]);
            }
        }
        for x in t.iter() {
            real(&mut s, *x);
        }
        s.push('\n');
    }
    for (j, u) in vars.c.iter().enumerate() {
        write!(s, "u {j}").unwrap();
        for x in u.iter() {
            real(&mut s, *x);
        }
        s.push('\n');
    }
    s.push_str("end\n");
    s
}

/// Line-oriented reader with 1-based line numbers in its errors.
struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
            line: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<Vec<&'a str>> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l.split_whitespace().collect())
            }
            None => {
                self.line += 1;
                Err(self.err(format!("unexpected end of file, expected {what}")))
            }
        }
    }

    fn magic(&mut self, magic: &str) -> Result<()> {
        let f = self.next("magic line")?;
        if f != [magic] {
            return Err(self.err(format!("expected '{magic}'")));
        }
        let f = self.next("version line")?;
        if f.len() != 2 || f[0] != "version" {
            return Err(self.err("expected 'version <n>'"));
        }
        let v: u32 = f[1].parse().map_err(|_| self.err("bad version number"))?;
        if v != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: v,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn header<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let f = self.next(key)?;
        if f.len() != 2 || f[0] != key {
            return Err(self.err(format!("expected '{key} <value>'")));
        }
        f[1].parse().map_err(|_| self.err(format!("bad value for {key}: '{}'", f[1])))
    }

    fn record(&mut self, tag: &str, fields: usize, what: &str) -> Result<Vec<&'a str>> {
        let f = self.next(what)?;
        if f.first() != Some(&tag) {
            return Err(self.err(format!("{what}: expected tag '{tag}'")));
        }
        if f.len() != fields + 1 {
            return Err(self.err(format!("{what}: expected {fields} fields, found {}", f.len() - 1)));
        }
        Ok(f[1..].to_vec())
    }

    fn parse<T: std::str::FromStr>(&self, s: &str, what: &str, field: usize) -> Result<T> {
        s.parse()
            .map_err(|_| self.err(format!("{what}: field {field} '{s}' is not valid")))
    }

    fn end(&mut self) -> Result<()> {
        let f = self.next("'end'")?;
        if f != ["end"] {
            return Err(self.err("expected 'end'"));
        }
        for (i, l) in self.lines.by_ref() {
            if !l.trim().is_empty() {
                self.line = i + 1;
                return Err(self.err("content after 'end'"));
            }
        }
        Ok(())
    }
}

fn flag(r: &Reader, v: u8, key: &str) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(r.err(format!("{key} must be 0 or 1"))),
    }
}

pub fn read_problem(text: &str) -> Result<Problem> {
    let mut r = Reader::new(text);
    r.magic(PROBLEM_MAGIC)?;
    let n_cams: usize = r.header("n_cams")?;
    let n_pts: usize = r.header("n_pts")?;
    let eta: f64 = r.header("eta")?;
    let v: u8 = r.header("include_rot")?;
    let include_rot = flag(&r, v, "include_rot")?;
    let v: u8 = r.header("include_diag")?;
    let include_diag = flag(&r, v, "include_diag")?;
    let n_obs: usize = r.header("observations")?;
    let mut observations = Vec::with_capacity(n_obs);
    for idx in 0..n_obs {
        let what = format!("observation record {idx}");
        let f = r.record("o", 4, &what)?;
        observations.push(Observation {
            cam: r.parse(f[0], &what, 1)?,
            pt: r.parse(f[1], &what, 2)?,
            m: Vec2::new(r.parse(f[2], &what, 3)?, r.parse(f[3], &what, 4)?),
        });
    }
    let n_priors: usize = r.header("priors")?;
    let mut priors = Vec::with_capacity(n_priors);
    for idx in 0..n_priors {
        let what = format!("prior record {idx}");
        let f = r.record("p", 2 + 9 + 81, &what)?;
        let vals = f[2..]
            .iter()
            .enumerate()
            .map(|(i, s)| r.parse::<f64>(s, &what, i + 3))
            .collect::<Result<Vec<f64>>>()?;
        priors.push(RotationPrior {
            k: r.parse(f[0], &what, 1)?,
            l: r.parse(f[1], &what, 2)?,
            r_tilde: RotationMatrix::new_unchecked(Mat3::from_row_slice(&vals[..9])),
            w_sqrt: Mat9::from_row_slice(&vals[9..]),
        });
    }
    r.end()?;
    let prob = Problem {
        n_cams,
        n_pts,
        observations,
        priors,
        config: ObjectiveConfig {
            eta,
            include_rot,
            include_diag,
            ..Default::default()
        },
    };
    prob.validate()?;
    Ok(prob)
}

pub fn read_solution(text: &str) -> Result<Variables> {
    let mut r = Reader::new(text);
    r.magic(SOLUTION_MAGIC)?;
    let n_cams: usize = r.header("n_cams")?;
    let n_pts: usize = r.header("n_pts")?;
    let mut vars = Variables::zeros(n_cams, n_pts);
    for i in 0..n_cams {
        let what = format!("camera record {i}");
        let f = r.record("c", 13, &what)?;
        let idx: usize = r.parse(f[0], &what, 1)?;
        if idx != i {
            return Err(r.err(format!("{what}: expected index {i}, found {idx}")));
        }
        let vals = f[1..]
            .iter()
            .enumerate()
            .map(|(k, s)| r.parse::<f64>(s, &what, k + 2))
            .collect::<Result<Vec<f64>>>()?;
        vars.b[i] = Mat3::from_row_slice(&vals[..9]);
        vars.t[i] = Vec3::from_column_slice(&vals[9..]);
    }
    for j in 0..n_pts {
        let what = format!("point record {j}");
        let f = r.record("u", 4, &what)?;
        let idx: usize = r.parse(f[0], &what, 1)?;
        if idx != j {
            return Err(r.err(format!("{what}: expected index {j}, found {idx}")));
        }
        vars.c[j] = Vec3::new(
            r.parse(f[1], &what, 2)?,
            r.parse(f[2], &what, 3)?,
            r.parse(f[3], &what, 4)?,
        );
    }
    r.end()?;
    Ok(vars)
}

pub fn save_problem(prob: &Problem, path: &Path) -> Result<()> {
    std::fs::write(path, write_problem(prob))?;
    Ok(())
}

pub fn load_problem(path: &Path) -> Result<Problem> {
    read_problem(&std::fs::read_to_string(path)?)
}

pub fn save_solution(vars: &Variables, path: &Path) -> Result<()> {
    std::fs::write(path, write_solution(vars))?;
    Ok(())
}

pub fn load_solution(path: &Path) -> Result<Variables> {
    read_solution(&std::fs::read_to_string(path)?)
}

/// ASCII PLY with the points followed by the camera centers `-a^{-1} t`.
/// Vertices carry a `camera` flag (0 for points, 1 for centers). Cameras with
/// a singular block are left out with a warning; returns how many were.
pub fn write_ply(vars: &Variables) -> (String, usize) {
    let centers: Vec<Vec3> = vars
        .cameras()
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let center = c.center();
            if center.is_none() {
                log::warn!("camera {i} has a singular block, center omitted");
            }
            center
        })
        .collect();
    let omitted = vars.n_cams() - centers.len();
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\ncomment rotpose reconstruction\n");
    writeln!(s, "element vertex {}", vars.n_pts() + centers.len()).unwrap();
    s.push_str("property double x\nproperty double y\nproperty double z\nproperty uchar camera\nend_header\n");
    for u in &vars.c {
        writeln!(s, "{:e} {:e} {:e} 0", u.x, u.y, u.z).unwrap();
    }
    for c in &centers {
        // adding zero turns -0 into 0
        writeln!(s, "{:e} {:e} {:e} 1", c.x + 0.0, c.y + 0.0, c.z + 0.0).unwrap();
    }
    (s, omitted)
}

pub fn export_ply(vars: &Variables, path: &Path) -> Result<usize> {
    let (s, omitted) = write_ply(vars);
    std::fs::write(path, s)?;
    Ok(omitted)
}
