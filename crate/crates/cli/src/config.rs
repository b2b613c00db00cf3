use anyhow::{bail, Context, Result};
use eqft::background::{build_lattice, GeometryKind, SiteField};
use eqft::parametrix::{affine_shift, LocalData};
use eqft::verify::Tolerances;
use eqft::{BackgroundGeometry, LatticeSpace, Parametrix};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub background: BackgroundConfig,
    pub parametrix: ParametrixConfig,
    /// Verify groups to run; an empty list runs nothing and passes.
    pub tasks: Option<Vec<String>>,
    pub tolerances: Tolerances,
    pub output: Option<PathBuf>,
    pub mc_samples: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            background: BackgroundConfig::default(),
            parametrix: ParametrixConfig::default(),
            tasks: None,
            tolerances: Tolerances::default(),
            output: None,
            mc_samples: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundConfig {
    pub dim: usize,
    pub kind: GeometryKind,
    /// One value for every axis, or one per axis.
    pub extent: Vec<f64>,
    pub n: usize,
    pub refinement: Option<Vec<usize>>,
    pub a: Option<Vec<f64>>,
    pub c: f64,
    /// Whitespace or comma separated `c` values, one per site.
    pub c_field_file: Option<PathBuf>,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            dim: 2,
            kind: GeometryKind::FlatTorus,
            extent: vec![4.0],
            n: 8,
            refinement: None,
            a: None,
            c: 1.0,
            c_field_file: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParametrixKind {
    Exact,
    /// Exact Green kernel plus a smooth symmetric bump of size `shift_scale`.
    Shifted,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParametrixConfig {
    pub nu: Option<f64>,
    pub order: Option<usize>,
    pub kind: ParametrixKind,
    pub shift_scale: f64,
}

impl Default for ParametrixConfig {
    fn default() -> Self {
        ParametrixConfig { nu: None, order: None, kind: ParametrixKind::Exact, shift_scale: 0.01 }
    }
}

pub fn read_values(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().with_context(|| format!("bad number {s:?} in {}", path.display())))
        .collect()
}

pub fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text)?,
        _ => toml::from_str(&text)?,
    };
    cfg.resolve()
}

impl RunConfig {
    /// Fills defaults that depend on other fields so the hash sees the resolved values.
    fn resolve(mut self) -> Result<Self> {
        let b = &mut self.background;
        if b.extent.len() == 1 {
            b.extent = vec![b.extent[0]; b.dim];
        }
        if b.extent.len() != b.dim {
            bail!("extent has {} entries for dimension {}", b.extent.len(), b.dim);
        }
        if b.a.is_none() {
            b.a = Some(vec![0.0; b.dim]);
        }
        if let Some(r) = &b.refinement {
            match r.last() {
                Some(&n) => b.n = n,
                None => bail!("refinement list is empty"),
            }
        }
        Ok(self)
    }

    pub fn geometry(&self) -> Result<BackgroundGeometry> {
        let b = &self.background;
        let extent = if b.extent.len() == 1 { vec![b.extent[0]; b.dim] } else { b.extent.clone() };
        let a = b.a.clone().unwrap_or_else(|| vec![0.0; b.dim]);
        let mut g = BackgroundGeometry::flat(b.kind, extent, a, b.c)?;
        if let Some(path) = &b.c_field_file {
            g.scalar_c = SiteField::Sampled { n: b.n, values: read_values(path)? };
            g.validate()?;
        }
        Ok(g)
    }

    pub fn background(&self) -> Result<(BackgroundGeometry, LatticeSpace)> {
        let g = self.geometry()?;
        let l = build_lattice(&g, self.background.n)?;
        Ok((g, l))
    }

    /// The configured parametrix; exact Green kernels go through `EQFT_CACHE_DIR` when set.
    pub fn parametrix(&self, g: &BackgroundGeometry, l: &LatticeSpace) -> Result<Parametrix> {
        let mut p = cached_green(g, l)?;
        if let Some(nu) = self.parametrix.nu {
            p = p.with_nu(nu)?;
        }
        if let Some(order) = self.parametrix.order {
            p = p.with_order(order)?;
        }
        if self.parametrix.kind == ParametrixKind::Shifted {
            let ext = l.physical_extent();
            let bump = |x: usize| {
                let r = l.position(x);
                1.0 + (std::f64::consts::TAU * r[0] / ext[0]).cos()
            };
            let s = DMatrix::from_fn(l.n(), l.n(), |x, y| self.parametrix.shift_scale * bump(x) * bump(y));
            p = affine_shift(&p, &s)?;
        }
        Ok(p)
    }
}

fn cached_green(g: &BackgroundGeometry, l: &LatticeSpace) -> Result<Parametrix> {
    let Some(dir) = std::env::var_os("EQFT_CACHE_DIR") else {
        return Ok(Parametrix::green(g, l)?);
    };
    let dir = PathBuf::from(dir);
    let path = dir.join(format!("{}-{}.bin", l.background_id, l.sites_per_axis));
    if path.exists() {
        let mut p = eqft::io::read_parametrix(&path, l)?;
        p.local = LocalData::from_geometry(g, l);
        return Ok(p);
    }
    let p = Parametrix::green(g, l)?;
    std::fs::create_dir_all(&dir)?;
    let tmp = path.with_extension("tmp");
    eqft::io::write_parametrix(&tmp, &p)?;
    std::fs::rename(&tmp, &path)?;
    Ok(p)
}
