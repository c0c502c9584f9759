//! Procedural mesh families, augmentation and dataset manifests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::{cross, dot, load_obj, sub, Mesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Box,
    Table,
    Shelf,
    WedgeLamp,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Box, Family::Table, Family::Shelf, Family::WedgeLamp];

    pub fn name(self) -> &'static str {
        match self {
            Family::Box => "box",
            Family::Table => "table",
            Family::Shelf => "shelf",
            Family::WedgeLamp => "wedge-lamp",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown family '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub family: Family,
    pub count: usize,
    pub seed: u64,
}

/// Append a convex part, orienting each face away from the part centroid.
fn push_convex(mesh: &mut Mesh, verts: &[[f64; 3]], faces: &[[usize; 3]]) {
    let base = mesh.vertices.len();
    let n = verts.len() as f64;
    let mut c = [0.0; 3];
    for v in verts {
        for k in 0..3 {
            c[k] += v[k] / n;
        }
    }
    for f in faces {
        let [a, b, d] = f.map(|i| verts[i]);
        let normal = cross(sub(b, a), sub(d, a));
        let mid = [
            (a[0] + b[0] + d[0]) / 3.0,
            (a[1] + b[1] + d[1]) / 3.0,
            (a[2] + b[2] + d[2]) / 3.0,
        ];
        let face = if dot(normal, sub(mid, c)) < 0.0 {
            [f[0], f[2], f[1]]
        } else {
            *f
        };
        mesh.faces.push(face.map(|i| i + base));
    }
    mesh.vertices.extend_from_slice(verts);
}

/// Axis-aligned cuboid, two triangles per side.
pub fn push_cuboid(mesh: &mut Mesh, lo: [f64; 3], hi: [f64; 3]) {
    let verts: Vec<[f64; 3]> = (0..8)
        .map(|i| {
            [
                if i & 1 == 0 { lo[0] } else { hi[0] },
                if i & 2 == 0 { lo[1] } else { hi[1] },
                if i & 4 == 0 { lo[2] } else { hi[2] },
            ]
        })
        .collect();
    let quads = [
        [0, 4, 6, 2],
        [1, 3, 7, 5],
        [0, 1, 5, 4],
        [2, 6, 7, 3],
        [0, 2, 3, 1],
        [4, 5, 7, 6],
    ];
    let faces: Vec<[usize; 3]> = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    push_convex(mesh, &verts, &faces);
}

/// Triangle `(x0, y0) (x1, y0) (xm, y1)` extruded from `z0` to `z1`.
fn push_prism(mesh: &mut Mesh, x0: f64, x1: f64, xm: f64, y0: f64, y1: f64, z0: f64, z1: f64) {
    let verts = [
        [x0, y0, z0],
        [x1, y0, z0],
        [xm, y1, z0],
        [x0, y0, z1],
        [x1, y0, z1],
        [xm, y1, z1],
    ];
    let faces = [
        [0, 1, 2],
        [3, 5, 4],
        [0, 3, 4],
        [0, 4, 1],
        [1, 4, 5],
        [1, 5, 2],
        [2, 5, 3],
        [2, 3, 0],
    ];
    push_convex(mesh, &verts, &faces);
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn generate_one(family: Family, rng: &mut impl Rng) -> Mesh {
    let mut m = Mesh::default();
    match family {
        Family::Box => {
            let e = [
                uniform(rng, 0.3, 1.0),
                uniform(rng, 0.3, 1.0),
                uniform(rng, 0.3, 1.0),
            ];
            push_cuboid(&mut m, [0.0; 3], e);
        }
        Family::Table => {
            let (w, d) = (uniform(rng, 0.8, 1.2), uniform(rng, 0.5, 1.0));
            let h = uniform(rng, 0.5, 0.9);
            let t = uniform(rng, 0.05, 0.1);
            let leg = uniform(rng, 0.06, 0.12);
            let inset = uniform(rng, 0.02, 0.1);
            push_cuboid(&mut m, [0.0, h, 0.0], [w, h + t, d]);
            for (cx, cz) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let x = if cx == 0 { inset } else { w - inset - leg };
                let z = if cz == 0 { inset } else { d - inset - leg };
                push_cuboid(&mut m, [x, 0.0, z], [x + leg, h, z + leg]);
            }
        }
        Family::Shelf => {
            let (w, d) = (uniform(rng, 0.6, 1.0), uniform(rng, 0.25, 0.5));
            let h = uniform(rng, 0.8, 1.2);
            let side = uniform(rng, 0.05, 0.08);
            let slab = uniform(rng, 0.04, 0.07);
            let k = rng.random_range(2..=5usize);
            push_cuboid(&mut m, [0.0, 0.0, 0.0], [side, h, d]);
            push_cuboid(&mut m, [w - side, 0.0, 0.0], [w, h, d]);
            for i in 0..k {
                let y = (h - slab) * i as f64 / (k - 1) as f64;
                push_cuboid(&mut m, [side, y, 0.0], [w - side, y + slab, d]);
            }
        }
        Family::WedgeLamp => {
            let base = uniform(rng, 0.3, 0.5);
            let bh = uniform(rng, 0.05, 0.1);
            let post = uniform(rng, 0.05, 0.08);
            let ph = uniform(rng, 0.4, 0.8);
            let sw = uniform(rng, 0.4, 0.7);
            let sh = uniform(rng, 0.2, 0.4);
            let sd = uniform(rng, 0.3, 0.5);
            let c = base / 2.0;
            push_cuboid(&mut m, [0.0, 0.0, 0.0], [base, bh, base]);
            push_cuboid(
                &mut m,
                [c - post / 2.0, bh, c - post / 2.0],
                [c + post / 2.0, bh + ph, c + post / 2.0],
            );
            let y0 = bh + ph;
            push_prism(
                &mut m,
                c - sw / 2.0,
                c + sw / 2.0,
                c,
                y0,
                y0 + sh,
                c - sd / 2.0,
                c + sd / 2.0,
            );
        }
    }
    m.normalize().expect("generated parts have positive extent")
}

/// `spec.count` normalized meshes of one family; deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Vec<Mesh> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|_| generate_one(spec.family, &mut rng))
        .collect()
}

/// Per-axis scale, renormalize, then a jitter shift kept inside the unit cube.
pub fn augment_with(mesh: &Mesh, scale: [f64; 3], jitter: [f64; 3]) -> Result<Mesh> {
    let scaled = Mesh {
        vertices: mesh
            .vertices
            .iter()
            .map(|v| [v[0] * scale[0], v[1] * scale[1], v[2] * scale[2]])
            .collect(),
        faces: mesh.faces.clone(),
    };
    let mut out = scaled.normalize()?;
    let (lo, hi) = out.bounding_box().ok_or(Error::Empty("mesh has no vertices"))?;
    let shift: Vec<f64> = (0..3)
        .map(|k| jitter[k].clamp(-0.5 - lo[k], 0.5 - hi[k]))
        .collect();
    for v in &mut out.vertices {
        for k in 0..3 {
            v[k] = (v[k] + shift[k]).clamp(-0.5, 0.5);
        }
    }
    Ok(out)
}

/// Random scale in `[0.75, 1.25]` and jitter in `[-0.1, 0.1]` per axis.
pub fn augment(mesh: &Mesh, seed: u64) -> Result<Mesh> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = [0; 3].map(|_| rng.random_range(0.75..=1.25));
    let jitter = [0; 3].map(|_| rng.random_range(-0.1..=0.1));
    augment_with(mesh, scale, jitter)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub family: String,
    pub faces: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_HEADER: &str = "#meshgpt-manifest v1";

impl DatasetManifest {
    /// Drop entries with more than `max_faces` faces, shuffle with `seed`, and
    /// assign the first `round(ratio * n)` to the training split.
    pub fn build(items: &[(String, String, usize)], max_faces: usize, ratio: f64, seed: u64) -> Self {
        let mut kept: Vec<&(String, String, usize)> =
            items.iter().filter(|(_, _, f)| *f <= max_faces).collect();
        kept.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let train = (ratio.clamp(0.0, 1.0) * kept.len() as f64).round() as usize;
        DatasetManifest {
            entries: kept
                .into_iter()
                .enumerate()
                .map(|(i, (path, family, faces))| ManifestEntry {
                    path: path.clone(),
                    family: family.clone(),
                    faces: *faces,
                    split: if i < train { Split::Train } else { Split::Test },
                })
                .collect(),
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.path, e.family, e.faces, e.split.name()));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Format(format!("manifest must start with '{MANIFEST_HEADER}'")));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                line: i + 2,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            let faces = fields[2].parse().map_err(|_| bad("bad face count"))?;
            let split = match fields[3] {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad("split must be train or test")),
            };
            entries.push(ManifestEntry {
                path: fields[0].to_string(),
                family: fields[1].to_string(),
                faces,
                split,
            });
        }
        Ok(DatasetManifest { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Every `.obj` file directly inside `dir`, sorted by file name.
pub fn load_obj_dir(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, Mesh)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| load_obj(&p).map(|m| (p, m)))
        .collect()
}
