//! Plain-text exchange format for QP instances.
//!
//! ```text
//! qp <n> <equality rows> <inequality rows>
//! Q <i> <j> <value>      upper triangle of Q
//! q <j> <value>
//! A <i> <j> <value>
//! b <i> <value>
//! C <i> <j> <value>
//! l <i> <value>          inf and -inf are allowed
//! u <i> <value>
//! name <j> <name>     the rest of the line
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use super::{QpProblem, SparseMatrix};
use crate::error::{Error, Result};

pub fn to_text(problem: &QpProblem) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "qp {} {} {}", problem.n, problem.n_eq(), problem.n_ineq());
    for &(i, j, v) in &problem.quadratic.entries {
        let _ = writeln!(out, "Q {i} {j} {v:e}");
    }
    for (j, v) in problem.linear.iter().enumerate() {
        if *v != 0.0 {
            let _ = writeln!(out, "q {j} {v:e}");
        }
    }
    for &(i, j, v) in &problem.eq.entries {
        let _ = writeln!(out, "A {i} {j} {v:e}");
    }
    for (i, v) in problem.eq_rhs.iter().enumerate() {
        let _ = writeln!(out, "b {i} {v:e}");
    }
    for &(i, j, v) in &problem.ineq.entries {
        let _ = writeln!(out, "C {i} {j} {v:e}");
    }
    for (i, (l, u)) in problem.lower.iter().zip(&problem.upper).enumerate() {
        let _ = writeln!(out, "l {i} {l:e}");
        let _ = writeln!(out, "u {i} {u:e}");
    }
    for (j, name) in problem.names.iter().enumerate() {
        let _ = writeln!(out, "name {j} {name}");
    }
    out
}

pub fn from_text(text: &str, origin: &str) -> Result<QpProblem> {
    let err = |line: usize, msg: String| Error::Parse { path: origin.to_string(), line, msg };
    let mut problem: Option<QpProblem> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let index = |k: usize, bound: usize| -> Result<usize> {
            let tok = fields.get(k).ok_or_else(|| err(line_no, "missing field".into()))?;
            let v: usize = tok.parse().map_err(|_| err(line_no, format!("bad index '{tok}'")))?;
            if v >= bound {
                return Err(err(line_no, format!("index {v} out of range (< {bound})")));
            }
            Ok(v)
        };
        let value = |k: usize| -> Result<f64> {
            let tok = fields.get(k).ok_or_else(|| err(line_no, "missing field".into()))?;
            tok.parse().map_err(|_| err(line_no, format!("bad number '{tok}'")))
        };
        let arity = |want: usize| -> Result<()> {
            if fields.len() != want {
                return Err(err(line_no, format!("expected {} fields, found {}", want, fields.len())));
            }
            Ok(())
        };

        if fields[0] == "qp" {
            if problem.is_some() {
                return Err(err(line_no, "duplicate header".into()));
            }
            arity(4)?;
            let n = index(1, usize::MAX)?;
            let meq = index(2, usize::MAX)?;
            let mineq = index(3, usize::MAX)?;
            let mut p = QpProblem::new(n);
            p.eq = SparseMatrix::new(meq, n);
            p.eq_rhs = vec![0.0; meq];
            p.ineq = SparseMatrix::new(mineq, n);
            p.lower = vec![f64::NEG_INFINITY; mineq];
            p.upper = vec![f64::INFINITY; mineq];
            problem = Some(p);
            continue;
        }
        let p = problem.as_mut().ok_or_else(|| err(line_no, "data before 'qp' header".into()))?;
        let (n, meq, mineq) = (p.n, p.n_eq(), p.n_ineq());
        match fields[0] {
            "Q" => {
                arity(4)?;
                let (i, j) = (index(1, n)?, index(2, n)?);
                if i > j {
                    return Err(err(line_no, "Q entries must be in the upper triangle".into()));
                }
                p.quadratic.push(i, j, value(3)?);
            }
            "q" => {
                arity(3)?;
                p.linear[index(1, n)?] = value(2)?;
            }
            "A" => {
                arity(4)?;
                let (i, j) = (index(1, meq)?, index(2, n)?);
                p.eq.push(i, j, value(3)?);
            }
            "b" => {
                arity(3)?;
                p.eq_rhs[index(1, meq)?] = value(2)?;
            }
            "C" => {
                arity(4)?;
                let (i, j) = (index(1, mineq)?, index(2, n)?);
                p.ineq.push(i, j, value(3)?);
            }
            "l" => {
                arity(3)?;
                p.lower[index(1, mineq)?] = value(2)?;
            }
            "u" => {
                arity(3)?;
                p.upper[index(1, mineq)?] = value(2)?;
            }
            "name" => {
                if fields.len() < 3 {
                    return Err(err(line_no, "name record needs an index and a name".into()));
                }
                let j = index(1, n)?;
                if p.names.is_empty() {
                    p.names = vec![String::new(); n];
                }
                p.names[j] = fields[2..].join(" ");
            }
            other => return Err(err(line_no, format!("unknown record '{other}'"))),
        }
    }
    let p = problem.ok_or_else(|| err(text.lines().count().max(1), "missing 'qp' header".into()))?;
    p.validate()?;
    Ok(p)
}

pub fn export(problem: &QpProblem, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(problem)).map_err(|e| Error::io(path, e))
}

pub fn import(path: &Path) -> Result<QpProblem> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text, &path.display().to_string())
}
