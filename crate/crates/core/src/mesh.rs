//! Regular quadrilateral sheets, tissue tagging and region selection.
//!
//! Nodes are numbered row-major (y outer, x inner); element connectivity is
//! counterclockwise. Downstream modules only rely on the node/element/tag/fiber
//! tables, so other element backends can slot in behind the same [`Mesh`].

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the generator used by [`assign_fibrosis`]; echoed into run metadata.
pub const FIBROSIS_RNG: &str = "ChaCha8Rng::seed_from_u64 + rand::seq::index::sample";

const FIBER_NORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TissueTag {
    MyocyteEpi,
    MyocyteMid,
    MyocyteEndo,
    Fibroblast,
}

impl TissueTag {
    pub const ALL: [TissueTag; 4] = [
        TissueTag::MyocyteEpi,
        TissueTag::MyocyteMid,
        TissueTag::MyocyteEndo,
        TissueTag::Fibroblast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TissueTag::MyocyteEpi => "myocyte_epi",
            TissueTag::MyocyteMid => "myocyte_mid",
            TissueTag::MyocyteEndo => "myocyte_endo",
            TissueTag::Fibroblast => "fibroblast",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub coords: Vec<[f64; 2]>,
    pub elements: Vec<[usize; 4]>,
    pub spacing: f64,
    pub tags: Vec<TissueTag>,
    pub fibers: Vec<[f64; 2]>,
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    /// Checks the structural invariants: index bounds, orientation and fiber norms.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let n = self.n_nodes();
        if self.tags.len() != n {
            errs.push(format!("tag table has {} entries for {} nodes", self.tags.len(), n));
        }
        if self.fibers.len() != self.elements.len() {
            errs.push(format!(
                "fiber table has {} entries for {} elements",
                self.fibers.len(),
                self.elements.len()
            ));
        }
        for (e, conn) in self.elements.iter().enumerate() {
            if let Some(&bad) = conn.iter().find(|&&i| i >= n) {
                errs.push(format!("element {e} references node {bad} (node count {n})"));
                continue;
            }
            if signed_area(conn.map(|i| self.coords[i])) <= 0.0 {
                errs.push(format!("element {e} is degenerate or clockwise"));
            }
        }
        for (e, f) in self.fibers.iter().enumerate() {
            let norm = f[0].hypot(f[1]);
            if (norm - 1.0).abs() > FIBER_NORM_TOL {
                errs.push(format!("fiber of element {e} has norm {norm}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.coords {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    /// Index of the node closest to `p`; ties go to the lowest index.
    pub fn nearest_node(&self, p: [f64; 2]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.coords.iter().enumerate() {
            let d = (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn count_tag(&self, tag: TissueTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    /// Serializes to the plain-text fixture format (see `docs/mesh-format.md`).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "monodomain-mesh 1");
        let _ = writeln!(out, "spacing {}", self.spacing);
        let _ = writeln!(out, "nodes {}", self.n_nodes());
        for (c, t) in self.coords.iter().zip(&self.tags) {
            let _ = writeln!(out, "{} {} {}", c[0], c[1], t.as_str());
        }
        let _ = writeln!(out, "elements {}", self.n_elements());
        for (e, f) in self.elements.iter().zip(&self.fibers) {
            let _ = writeln!(out, "{} {} {} {} {} {}", e[0], e[1], e[2], e[3], f[0], f[1]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse {
            path: "<mesh>".into(),
            message: format!("line {}: {msg}", line + 1),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |what: &str| lines.next().ok_or_else(|| bad(usize::MAX - 1, what));

        let (ln, header) = next("missing header")?;
        if header.trim() != "monodomain-mesh 1" {
            return Err(bad(ln, "unsupported header"));
        }
        let keyed = |ln: usize, line: &str, key: &str| -> Result<String> {
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(ln, &format!("expected `{key}`")));
            }
            parts.next().map(str::to_owned).ok_or_else(|| bad(ln, "missing value"))
        };
        let num = |ln: usize, s: &str| -> Result<f64> { s.parse().map_err(|_| bad(ln, "bad number")) };
        let idx = |ln: usize, s: &str| -> Result<usize> { s.parse().map_err(|_| bad(ln, "bad index")) };

        let (ln, l) = next("missing spacing")?;
        let spacing = num(ln, &keyed(ln, l, "spacing")?)?;
        let (ln, l) = next("missing node count")?;
        let n_nodes = idx(ln, &keyed(ln, l, "nodes")?)?;
        let mut coords = Vec::with_capacity(n_nodes);
        let mut tags = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let (ln, l) = next("truncated node table")?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad(ln, "node line needs `x y tag`"));
            }
            coords.push([num(ln, f[0])?, num(ln, f[1])?]);
            tags.push(TissueTag::parse(f[2]).ok_or_else(|| bad(ln, "unknown tag"))?);
        }
        let (ln, l) = next("missing element count")?;
        let n_elems = idx(ln, &keyed(ln, l, "elements")?)?;
        let mut elements = Vec::with_capacity(n_elems);
        let mut fibers = Vec::with_capacity(n_elems);
        for _ in 0..n_elems {
            let (ln, l) = next("truncated element table")?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad(ln, "element line needs `n0 n1 n2 n3 fx fy`"));
            }
            elements.push([idx(ln, f[0])?, idx(ln, f[1])?, idx(ln, f[2])?, idx(ln, f[3])?]);
            fibers.push([num(ln, f[4])?, num(ln, f[5])?]);
        }
        let mesh = Mesh {
            coords,
            elements,
            spacing,
            tags,
            fibers,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Mesh::from_text(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.into(),
                message,
            },
            other => other,
        })
    }
}

pub(crate) fn signed_area(p: [[f64; 2]; 4]) -> f64 {
    let mut a = 0.0;
    for i in 0..4 {
        let j = (i + 1) % 4;
        a += p[i][0] * p[j][1] - p[j][0] * p[i][1];
    }
    0.5 * a
}

fn cells_along(len: f64, h: f64, axis: &str) -> Result<usize> {
    if !(len > 0.0 && h > 0.0 && len.is_finite() && h.is_finite()) {
        return Err(Error::invalid(format!(
            "sheet {axis}-length {len} and spacing {h} must be positive and finite"
        )));
    }
    let n = (len / h).round();
    if n < 1.0 || (n * h - len).abs() > 1e-9 * len {
        return Err(Error::invalid(format!(
            "sheet {axis}-length {len} cm is not an exact multiple of spacing {h} cm"
        )));
    }
    Ok(n as usize)
}

/// Regular `lx` x `ly` sheet of square bilinear elements with uniform fibers at
/// `fiber_angle` radians from the x axis. All nodes start as epicardial myocytes.
pub fn build_regular_sheet(lx: f64, ly: f64, h: f64, fiber_angle: f64) -> Result<Mesh> {
    let nx = cells_along(lx, h, "x")?;
    let ny = cells_along(ly, h, "y")?;
    let row = nx + 1;
    let mut coords = Vec::with_capacity(row * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            coords.push([i as f64 * h, j as f64 * h]);
        }
    }
    let mut elements = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let n0 = j * row + i;
            elements.push([n0, n0 + 1, n0 + 1 + row, n0 + row]);
        }
    }
    let fiber = [fiber_angle.cos(), fiber_angle.sin()];
    Ok(Mesh {
        tags: vec![TissueTag::MyocyteEpi; coords.len()],
        fibers: vec![fiber; elements.len()],
        coords,
        elements,
        spacing: h,
    })
}

/// Like [`build_regular_sheet`] but with `floor(l / h)` cells per axis, so the
/// sheet may be slightly smaller than requested when `l` is not a multiple of `h`.
pub fn build_truncated_sheet(lx: f64, ly: f64, h: f64, fiber_angle: f64) -> Result<Mesh> {
    if !(lx > 0.0 && ly > 0.0 && h > 0.0 && lx.is_finite() && ly.is_finite() && h.is_finite()) {
        return Err(Error::invalid(format!("sheet {lx} x {ly} with spacing {h} must be positive and finite")));
    }
    let nx = (lx / h + 1e-9).floor();
    let ny = (ly / h + 1e-9).floor();
    if nx < 1.0 || ny < 1.0 {
        return Err(Error::invalid(format!("spacing {h} cm exceeds the sheet {lx} x {ly} cm")));
    }
    build_regular_sheet(nx * h, ny * h, h, fiber_angle)
}

/// Retags exactly `round(fraction * N)` nodes as fibroblasts, drawn uniformly
/// without replacement from all nodes by a seeded ChaCha8 stream.
pub fn assign_fibrosis(mesh: &Mesh, fraction: f64, seed: u64) -> Result<Mesh> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("fibrosis fraction {fraction} outside [0, 1]")));
    }
    let n = mesh.n_nodes();
    let count = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = mesh.clone();
    for i in rand::seq::index::sample(&mut rng, n, count) {
        out.tags[i] = TissueTag::Fibroblast;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// coordinate <= bound
    Below,
    /// coordinate >= bound
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionSelector {
    HalfPlaneX { bound: f64, side: Side },
    HalfPlaneY { bound: f64, side: Side },
    Rect { x_min: f64, x_max: f64, y_min: f64, y_max: f64 },
    Nodes { indices: Vec<usize> },
    Disc { center: [f64; 2], radius: f64 },
}

impl RegionSelector {
    fn check(&self, n_nodes: usize) -> Result<()> {
        let finite = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
        let ok = match self {
            RegionSelector::HalfPlaneX { bound, .. } | RegionSelector::HalfPlaneY { bound, .. } => {
                finite(&[*bound])
            }
            RegionSelector::Rect { x_min, x_max, y_min, y_max } => {
                finite(&[*x_min, *x_max, *y_min, *y_max]) && x_min <= x_max && y_min <= y_max
            }
            RegionSelector::Nodes { indices } => {
                if let Some(bad) = indices.iter().find(|&&i| i >= n_nodes) {
                    return Err(Error::invalid(format!(
                        "node selector index {bad} out of range (node count {n_nodes})"
                    )));
                }
                true
            }
            RegionSelector::Disc { center, radius } => finite(&[center[0], center[1], *radius]) && *radius >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("malformed region selector {self:?}")))
        }
    }
}

/// Sorted, deduplicated indices of the nodes inside `sel`. Boundaries are
/// inclusive up to a relative tolerance of 1e-9 of the mesh extent.
pub fn select_nodes(mesh: &Mesh, sel: &RegionSelector) -> Result<Vec<usize>> {
    sel.check(mesh.n_nodes())?;
    let (lo, hi) = mesh.bounding_box();
    let eps = 1e-9 * (hi[0] - lo[0]).abs().max(hi[1] - lo[1]).max(mesh.spacing);
    let side_ok = |c: f64, bound: f64, side: Side| match side {
        Side::Below => c <= bound + eps,
        Side::Above => c >= bound - eps,
    };
    let mut out: Vec<usize> = match sel {
        RegionSelector::Nodes { indices } => indices.clone(),
        _ => mesh
            .coords
            .iter()
            .enumerate()
            .filter(|(_, p)| match sel {
                RegionSelector::HalfPlaneX { bound, side } => side_ok(p[0], *bound, *side),
                RegionSelector::HalfPlaneY { bound, side } => side_ok(p[1], *bound, *side),
                RegionSelector::Rect { x_min, x_max, y_min, y_max } => {
                    p[0] >= x_min - eps && p[0] <= x_max + eps && p[1] >= y_min - eps && p[1] <= y_max + eps
                }
                RegionSelector::Disc { center, radius } => {
                    (p[0] - center[0]).hypot(p[1] - center[1]) <= radius + eps
                }
                RegionSelector::Nodes { .. } => unreachable!(),
            })
            .map(|(i, _)| i)
            .collect(),
    };
    out.sort_unstable();
    out.dedup();
    Ok(out)
}
