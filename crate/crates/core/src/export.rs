//! CSV and binary dumps of simulated paths and adjoint values.
//!
//! The binary layout is little endian: the magic `SOCXPB`, a `u16` version,
//! then `u64` fields `seed, paths, steps, state_dim, control_dim`, the `f64`
//! horizon, and the `states`, `controls`, `brownian`, `increments` arrays in
//! that order.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::adjoint::AdjointSolution;
use crate::error::{Error, Result};
use crate::sde::{PathBundle, TimeGrid};

pub const BINARY_MAGIC: &[u8; 6] = b"SOCXPB";
pub const BINARY_VERSION: u16 = 1;

/// Writes `x.csv`, `u.csv` and `w.csv` (columns `path,k,t,...`). Returns the file paths.
pub fn write_bundle_csv(bundle: &PathBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let grid = bundle.grid;
    let table = |name: &str, dim: usize, get: &dyn Fn(usize, usize) -> Vec<f64>| -> Result<PathBuf> {
        let mut s = String::from("path,k,t");
        for i in 1..=dim {
            let _ = write!(s, ",{name}_{i}");
        }
        s.push('\n');
        for p in 0..bundle.paths {
            for k in 0..bundle.nodes() {
                let _ = write!(s, "{p},{k},{}", grid.t(k));
                for v in get(p, k) {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
            }
        }
        let path = dir.join(format!("{name}.csv"));
        fs::write(&path, s)?;
        Ok(path)
    };
    Ok(vec![
        table("x", bundle.state_dim, &|p, k| bundle.x(p, k).to_vec())?,
        table("u", bundle.control_dim, &|p, k| bundle.u(p, k).to_vec())?,
        table("w", 1, &|p, k| vec![bundle.w(p, k)])?,
    ])
}

/// Writes `p1,q1` (and `p2,q2` when solved) along the given paths as `adjoint.csv`.
pub fn write_adjoint_csv(adj: &AdjointSolution, bundle: &PathBundle, paths: usize, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let n = adj.n;
    let mut s = String::from("path,k,t");
    let mut names = vec!["p1", "q1"];
    if adj.has_second() {
        names.extend(["p2", "q2"]);
    }
    for name in &names {
        let len = if name.ends_with('1') { n } else { n * n };
        for i in 1..=len {
            let _ = write!(s, ",{name}_{i}");
        }
    }
    s.push('\n');
    let mut v1 = vec![0.0; n];
    let mut v2 = vec![0.0; n * n];
    for p in 0..paths.min(bundle.paths) {
        for k in 0..bundle.nodes() {
            let (x, w) = (bundle.x(p, k), bundle.w(p, k));
            let _ = write!(s, "{p},{k},{}", bundle.grid.t(k));
            let mut push = |vals: &[f64]| {
                for v in vals {
                    let _ = write!(s, ",{v}");
                }
            };
            adj.p1(k, x, w, &mut v1);
            push(&v1);
            adj.q1(k, x, w, &mut v1);
            push(&v1);
            if adj.has_second() {
                adj.p2(k, x, w, &mut v2);
                push(&v2);
                adj.q2(k, x, w, &mut v2);
                push(&v2);
            }
            s.push('\n');
        }
    }
    let path = dir.join("adjoint.csv");
    fs::write(&path, s)?;
    Ok(path)
}

pub fn write_bundle_binary(bundle: &PathBundle, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(64 + 8 * (bundle.states.len() + bundle.controls.len() + 2 * bundle.brownian.len()));
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    for v in [
        bundle.seed,
        bundle.paths as u64,
        bundle.grid.steps as u64,
        bundle.state_dim as u64,
        bundle.control_dim as u64,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&bundle.grid.horizon.to_le_bytes());
    for arr in [&bundle.states, &bundle.controls, &bundle.brownian, &bundle.increments] {
        for v in arr.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_bundle_binary(path: &Path) -> Result<PathBundle> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |what: &str| Error::Invalid(format!("{}: {what}", path.display()));
    if buf.len() < 8 + 48 || &buf[..6] != BINARY_MAGIC {
        return Err(bad("not a path bundle"));
    }
    let version = u16::from_le_bytes([buf[6], buf[7]]);
    if version != BINARY_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut pos = 8;
    let mut word = || {
        let w: [u8; 8] = buf[pos..pos + 8].try_into().expect("8 bytes");
        pos += 8;
        w
    };
    let mut head = [0u64; 5];
    for h in head.iter_mut() {
        *h = u64::from_le_bytes(word());
    }
    let horizon = f64::from_le_bytes(word());
    let [seed, paths, steps, n, m] = head.map(|v| v as usize);
    let nodes = steps + 1;
    let lens = [paths * nodes * n, paths * nodes * m, paths * nodes, paths * steps];
    let total: usize = lens.iter().sum();
    if buf.len() != pos + 8 * total {
        return Err(bad("truncated or oversized payload"));
    }
    let mut arrays = lens.iter().map(|&len| {
        let v: Vec<f64> = buf[pos..pos + 8 * len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += 8 * len;
        v
    });
    let (states, controls, brownian, increments) = (
        arrays.next().expect("four arrays"),
        arrays.next().expect("four arrays"),
        arrays.next().expect("four arrays"),
        arrays.next().expect("four arrays"),
    );
    Ok(PathBundle {
        grid: TimeGrid::new(horizon, steps)?,
        seed: seed as u64,
        paths,
        state_dim: n,
        control_dim: m,
        states,
        controls,
        brownian,
        increments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::sde::{simulate_state, BrownianBundle};

    #[test]
    fn binary_round_trip_is_exact() {
        let ex = fixtures::ex31();
        let b = BrownianBundle::new(7, 5, TimeGrid::new(1.0, 16).unwrap());
        let bundle = simulate_state(&ex.problem, &ex.candidates[0], &ex.constraints.initial_point, &b).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("paths.bin");
        write_bundle_binary(&bundle, &f).unwrap();
        assert_eq!(read_bundle_binary(&f).unwrap(), bundle);
        let mut raw = fs::read(&f).unwrap();
        raw[6] = 9;
        fs::write(&f, &raw).unwrap();
        assert!(read_bundle_binary(&f).is_err());
        raw.truncate(40);
        fs::write(&f, &raw).unwrap();
        assert!(read_bundle_binary(&f).is_err());
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let ex = fixtures::ex31();
        let b = BrownianBundle::new(7, 3, TimeGrid::new(1.0, 8).unwrap());
        let bundle = simulate_state(&ex.problem, &ex.candidates[0], &ex.constraints.initial_point, &b).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_bundle_csv(&bundle, dir.path()).unwrap();
        let x = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(x.lines().next().unwrap(), "path,k,t,x_1,x_2");
        assert_eq!(x.lines().count(), 1 + 3 * 9);
    }
}
