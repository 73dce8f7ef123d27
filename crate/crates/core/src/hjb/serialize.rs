//! On-disk form of a solved value grid.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! offset  field
//! 0       magic "RLVG" (4 bytes)
//! 4       format version, u32 (currently 1)
//! 8       problem kind, u8: 0 constrained, 1 risk-neutral, 2 baseline
//! 9       reserved, 7 bytes of zero
//! 16      time grid: t0, t1, dt (3 x f64)
//! 40      theta, terminal offset b (2 x f64)
//! 56      axes w, x, y: (min f64, max f64, n u64) each
//! 128     control mesh: n_u u64, u_levels (n_u x f64),
//!         n_gamma u64, gamma pairs (2 x f64 each),
//!         n_zeta u64, zeta pairs (2 x f64 each),
//!         gamma_max f64, zeta_max f64
//! ...     fingerprints: 3 x (len u64, utf8 bytes) - agent, market, solver
//! ...     values: count u64, then count x f64, time-major slices
//! ```
//!
//! The CSV export writes one time slice with node coordinates spelled out,
//! for spreadsheet-level inspection.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::models::TimeGrid;

use super::{AxisSpec, ControlMesh, Fingerprints, GridSpec, ProblemKind, ValueGrid};

const MAGIC: &[u8; 4] = b"RLVG";
const VERSION: u32 = 1;

fn kind_code(k: ProblemKind) -> u8 {
    match k {
        ProblemKind::Constrained => 0,
        ProblemKind::RiskNeutral => 1,
        ProblemKind::Baseline => 2,
    }
}

fn kind_from(code: u8, path: &Path) -> Result<ProblemKind> {
    match code {
        0 => Ok(ProblemKind::Constrained),
        1 => Ok(ProblemKind::RiskNeutral),
        2 => Ok(ProblemKind::Baseline),
        other => Err(CoreError::Parse {
            path: path.to_path_buf(),
            message: format!("unknown problem kind code {other}"),
        }),
    }
}

struct Sink<W: Write> {
    w: W,
}

impl<W: Write> Sink<W> {
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn str(&mut self, s: &str) -> std::io::Result<()> {
        self.u64(s.len() as u64)?;
        self.w.write_all(s.as_bytes())
    }
}

struct Source<R: Read> {
    r: R,
    path: std::path::PathBuf,
}

impl<R: Read> Source<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| CoreError::Parse { path: self.path.clone(), message: "truncated file".into() })?;
        Ok(buf)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes::<8>()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes::<8>()?))
    }
    fn len(&mut self, what: &str, cap: u64) -> Result<usize> {
        let n = self.u64()?;
        if n > cap {
            return Err(CoreError::Parse {
                path: self.path.clone(),
                message: format!("implausible {what} length {n}"),
            });
        }
        Ok(n as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len("string", 1 << 20)?;
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| CoreError::Parse { path: self.path.clone(), message: "truncated file".into() })?;
        String::from_utf8(buf)
            .map_err(|_| CoreError::Parse { path: self.path.clone(), message: "invalid utf-8".into() })
    }
}

impl ValueGrid {
    /// Write the grid to `path` in the binary layout above.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
        let mut s = Sink { w: BufWriter::new(file) };
        let inner = (|| -> std::io::Result<()> {
            s.w.write_all(MAGIC)?;
            s.w.write_all(&VERSION.to_le_bytes())?;
            s.w.write_all(&[kind_code(self.kind), 0, 0, 0, 0, 0, 0, 0])?;
            s.f64(self.grid.time.t0)?;
            s.f64(self.grid.time.t1)?;
            s.f64(self.grid.time.dt)?;
            s.f64(self.theta)?;
            s.f64(self.b)?;
            for ax in [&self.grid.w, &self.grid.x, &self.grid.y] {
                s.f64(ax.min)?;
                s.f64(ax.max)?;
                s.u64(ax.n as u64)?;
            }
            s.u64(self.mesh.u_levels.len() as u64)?;
            for &u in &self.mesh.u_levels {
                s.f64(u)?;
            }
            s.u64(self.mesh.gamma.len() as u64)?;
            for g in &self.mesh.gamma {
                s.f64(g[0])?;
                s.f64(g[1])?;
            }
            s.u64(self.mesh.zeta.len() as u64)?;
            for z in &self.mesh.zeta {
                s.f64(z[0])?;
                s.f64(z[1])?;
            }
            s.f64(self.mesh.gamma_max)?;
            s.f64(self.mesh.zeta_max)?;
            s.str(&self.fingerprints.agent)?;
            s.str(&self.fingerprints.market)?;
            s.str(&self.fingerprints.solver)?;
            s.u64(self.values.len() as u64)?;
            for &v in &self.values {
                s.f64(v)?;
            }
            s.w.flush()
        })();
        inner.map_err(|e| CoreError::io(path, e))
    }

    /// Read a grid back, validating magic, version, and payload size.
    pub fn read_binary(path: &Path) -> Result<ValueGrid> {
        let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
        let mut s = Source { r: BufReader::new(file), path: path.to_path_buf() };

        let magic = s.bytes::<4>()?;
        if &magic != MAGIC {
            return Err(CoreError::Parse {
                path: path.to_path_buf(),
                message: "not a value-grid file (bad magic)".into(),
            });
        }
        let version = u32::from_le_bytes(s.bytes::<4>()?);
        if version != VERSION {
            return Err(CoreError::Parse {
                path: path.to_path_buf(),
                message: format!("unsupported format version {version}"),
            });
        }
        let head = s.bytes::<8>()?;
        let kind = kind_from(head[0], path)?;

        let t0 = s.f64()?;
        let t1 = s.f64()?;
        let dt = s.f64()?;
        let theta = s.f64()?;
        let b = s.f64()?;

        let mut axes = [AxisSpec { min: 0.0, max: 1.0, n: 3 }; 3];
        for ax in axes.iter_mut() {
            ax.min = s.f64()?;
            ax.max = s.f64()?;
            ax.n = s.len("axis", 1 << 32)?;
        }

        let n_u = s.len("control set", 1 << 20)?;
        let mut u_levels = Vec::with_capacity(n_u);
        for _ in 0..n_u {
            u_levels.push(s.f64()?);
        }
        let n_g = s.len("gamma mesh", 1 << 24)?;
        let mut gamma = Vec::with_capacity(n_g);
        for _ in 0..n_g {
            gamma.push([s.f64()?, s.f64()?]);
        }
        let n_z = s.len("zeta mesh", 1 << 24)?;
        let mut zeta = Vec::with_capacity(n_z);
        for _ in 0..n_z {
            zeta.push([s.f64()?, s.f64()?]);
        }
        let gamma_max = s.f64()?;
        let zeta_max = s.f64()?;

        let fingerprints = Fingerprints { agent: s.str()?, market: s.str()?, solver: s.str()? };

        let count = s.len("value table", 1 << 40)?;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(s.f64()?);
        }

        let grid = GridSpec {
            w: axes[0],
            x: axes[1],
            y: axes[2],
            time: TimeGrid::new(t0, t1, dt)?,
        };
        let vg = ValueGrid {
            kind,
            grid,
            theta,
            b,
            mesh: ControlMesh { u_levels, gamma, zeta, gamma_max, zeta_max },
            fingerprints,
            values,
        };
        let expected = vg.slice_len() * vg.n_slices();
        if vg.values.len() != expected {
            return Err(CoreError::Parse {
                path: path.to_path_buf(),
                message: format!(
                    "value table holds {} entries but the grid needs {expected}",
                    vg.values.len()
                ),
            });
        }
        Ok(vg)
    }

    /// Export one time slice as CSV with node coordinates.
    pub fn write_csv_slice(&self, k: usize, path: &Path) -> Result<()> {
        if k >= self.n_slices() {
            return Err(CoreError::validation(format!(
                "slice {k} out of range, grid has {} slices",
                self.n_slices()
            )));
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let sl = self.slice(k);
        let res: csv::Result<()> = (|| {
            match self.kind {
                ProblemKind::Constrained => {
                    w.write_record(["w", "x", "y", "value"])?;
                    let (nx, ny) = (self.grid.x.n, self.grid.y.n);
                    for (idx, v) in sl.iter().enumerate() {
                        let iy = idx % ny;
                        let ix = (idx / ny) % nx;
                        let iw = idx / (ny * nx);
                        w.write_record([
                            self.grid.w.node(iw).to_string(),
                            self.grid.x.node(ix).to_string(),
                            self.grid.y.node(iy).to_string(),
                            v.to_string(),
                        ])?;
                    }
                }
                ProblemKind::RiskNeutral => {
                    w.write_record(["w", "x", "value"])?;
                    let nx = self.grid.x.n;
                    for (idx, v) in sl.iter().enumerate() {
                        w.write_record([
                            self.grid.w.node(idx / nx).to_string(),
                            self.grid.x.node(idx % nx).to_string(),
                            v.to_string(),
                        ])?;
                    }
                }
                ProblemKind::Baseline => {
                    w.write_record(["x", "value"])?;
                    for (idx, v) in sl.iter().enumerate() {
                        w.write_record([self.grid.x.node(idx).to_string(), v.to_string()])?;
                    }
                }
            }
            w.flush()?;
            Ok(())
        })();
        res.map_err(|e| CoreError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }
}
