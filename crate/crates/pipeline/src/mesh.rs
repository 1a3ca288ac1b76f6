//! Landmark meshes: the vertex set that anchors Gaussians, with a vertex
//! order shared by every subject of a dataset.

use std::path::Path;

use gsavatar_core::error::{Error, Result};
use gsavatar_core::io::{read_json, write_json};
use gsavatar_core::linalg::{add3, cross3, dot3, norm3, normalize3, scale3, sub3, Vec3};
use gsavatar_core::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkMesh<T> {
    pub vertices: Vec<Vec3<T>>,
    /// Unit outward normals, one per vertex.
    pub normals: Vec<Vec3<T>>,
    pub edges: Vec<[u32; 2]>,
    /// Counter-clockwise seen from outside.
    pub faces: Vec<[u32; 3]>,
}

impl<T: Scalar> LandmarkMesh<T> {
    /// Unit sphere with `rings` latitude rings of `segments` vertices plus
    /// two poles on ±y, so `V = rings·segments + 2`. Segment 0 of every
    /// ring faces +z. `uv_sphere(65, 78)` has 5072 vertices.
    pub fn uv_sphere(rings: usize, segments: usize) -> Result<Self> {
        if rings < 1 || segments < 3 {
            return Err(Error::validation("uv_sphere needs rings >= 1 and segments >= 3"));
        }
        let pi = std::f64::consts::PI;
        let mut vertices = vec![[T::zero(), T::one(), T::zero()]];
        for i in 1..=rings {
            let theta = pi * i as f64 / (rings + 1) as f64;
            for j in 0..segments {
                let phi = 2.0 * pi * j as f64 / segments as f64;
                vertices.push([
                    T::lit(theta.sin() * phi.sin()),
                    T::lit(theta.cos()),
                    T::lit(theta.sin() * phi.cos()),
                ]);
            }
        }
        vertices.push([T::zero(), -T::one(), T::zero()]);
        let south = (vertices.len() - 1) as u32;
        let at = |ring: usize, seg: usize| (1 + (ring - 1) * segments + seg % segments) as u32;
        let mut faces = Vec::new();
        for j in 0..segments {
            faces.push([0, at(1, j), at(1, j + 1)]);
            faces.push([south, at(rings, j + 1), at(rings, j)]);
        }
        for i in 1..rings {
            for j in 0..segments {
                let (a, b, c, d) = (at(i, j), at(i, j + 1), at(i + 1, j), at(i + 1, j + 1));
                faces.push([a, c, b]);
                faces.push([b, c, d]);
            }
        }
        // orient outward
        for f in faces.iter_mut() {
            let [a, b, c] = f.map(|i| vertices[i as usize]);
            let n = cross3(sub3(b, a), sub3(c, a));
            let centroid = add3(add3(a, b), c);
            if dot3(n, centroid) < T::zero() {
                f.swap(1, 2);
            }
        }
        let mut mesh = LandmarkMesh {
            normals: vec![[T::zero(); 3]; vertices.len()],
            vertices,
            edges: Vec::new(),
            faces,
        };
        mesh.edges = edges_from_faces(&mesh.faces);
        mesh.recompute_normals()?;
        Ok(mesh)
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Area-weighted vertex normals from the faces.
    pub fn recompute_normals(&mut self) -> Result<()> {
        let mut acc = vec![[T::zero(); 3]; self.vertices.len()];
        for f in &self.faces {
            let [a, b, c] = f.map(|i| self.vertices[i as usize]);
            let n = cross3(sub3(b, a), sub3(c, a));
            for &i in f {
                acc[i as usize] = add3(acc[i as usize], n);
            }
        }
        for (i, n) in acc.iter().enumerate() {
            self.normals[i] = normalize3(*n).ok_or_else(|| Error::validation(format!("vertex {i} has no well-defined normal")))?;
        }
        Ok(())
    }

    /// Mean length of the edges touching each vertex. Errors on a vertex
    /// without edges.
    pub fn mean_incident_edge(&self) -> Result<Vec<T>> {
        let mut sum = vec![T::zero(); self.vertices.len()];
        let mut count = vec![0usize; self.vertices.len()];
        for &[a, b] in &self.edges {
            let l = norm3(sub3(self.vertices[a as usize], self.vertices[b as usize]));
            for v in [a, b] {
                sum[v as usize] += l;
                count[v as usize] += 1;
            }
        }
        sum.iter()
            .zip(&count)
            .enumerate()
            .map(|(i, (&s, &c))| {
                if c == 0 {
                    Err(Error::validation(format!("vertex {i} is isolated (no edges)")))
                } else {
                    Ok(s / T::count(c))
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertices.len();
        if self.normals.len() != v {
            return Err(Error::Dimension {
                what: "mesh normals",
                expected: v,
                got: self.normals.len(),
            });
        }
        for (i, p) in self.vertices.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite { what: "mesh vertex", index: i });
            }
        }
        for (i, n) in self.normals.iter().enumerate() {
            if (norm3(*n) - T::one()).abs().as_f64() > 1e-6 {
                return Err(Error::validation(format!("normal {i} is not unit length")));
            }
        }
        let bad = |i: u32| i as usize >= v;
        if self.edges.iter().any(|e| e.iter().any(|&i| bad(i)) || e[0] == e[1]) {
            return Err(Error::validation("edge index out of range or degenerate"));
        }
        if self.faces.iter().any(|f| f.iter().any(|&i| bad(i))) {
            return Err(Error::validation("face index out of range"));
        }
        Ok(())
    }

    /// Same vertex count, edges and faces.
    pub fn same_topology(&self, other: &LandmarkMesh<T>) -> bool {
        self.vertices.len() == other.vertices.len() && self.edges == other.edges && self.faces == other.faces
    }

    /// Moves every vertex to `r(d̂) · d̂` where `d̂` is its direction from
    /// the origin, then recomputes normals.
    pub fn displace_radially(&mut self, radius: impl Fn(Vec3<T>) -> T) -> Result<()> {
        for p in self.vertices.iter_mut() {
            let d = normalize3(*p).ok_or_else(|| Error::validation("vertex at the origin"))?;
            *p = scale3(d, radius(d));
        }
        self.recompute_normals()
    }

    pub fn cast<U: Scalar>(&self) -> LandmarkMesh<U> {
        let c = |v: Vec3<T>| v.map(|x| U::lit(x.as_f64()));
        LandmarkMesh {
            vertices: self.vertices.iter().map(|&v| c(v)).collect(),
            normals: self.normals.iter().map(|&v| c(v)).collect(),
            edges: self.edges.clone(),
            faces: self.faces.clone(),
        }
    }
}

fn edges_from_faces(faces: &[[u32; 3]]) -> Vec<[u32; 2]> {
    let mut edges: Vec<[u32; 2]> = faces
        .iter()
        .flat_map(|f| [[f[0], f[1]], [f[1], f[2]], [f[2], f[0]]])
        .map(|[a, b]| [a.min(b), a.max(b)])
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Landmark JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkFile {
    pub vertices: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    pub edges: Vec<[u32; 2]>,
    #[serde(default)]
    pub faces: Vec<[u32; 3]>,
}

impl<T: Scalar> From<&LandmarkMesh<T>> for LandmarkFile {
    fn from(m: &LandmarkMesh<T>) -> Self {
        let f = |v: &Vec3<T>| v.map(|x| x.as_f64());
        LandmarkFile {
            vertices: m.vertices.iter().map(f).collect(),
            normals: m.normals.iter().map(f).collect(),
            edges: m.edges.clone(),
            faces: m.faces.clone(),
        }
    }
}

impl LandmarkFile {
    pub fn to_mesh<T: Scalar>(&self) -> Result<LandmarkMesh<T>> {
        let c = |v: &[f64; 3]| v.map(T::lit);
        let m = LandmarkMesh {
            vertices: self.vertices.iter().map(c).collect(),
            normals: self.normals.iter().map(c).collect(),
            edges: self.edges.clone(),
            faces: self.faces.clone(),
        };
        m.validate()?;
        Ok(m)
    }
}

pub fn save_landmarks<T: Scalar>(path: impl AsRef<Path>, mesh: &LandmarkMesh<T>) -> Result<()> {
    write_json(path, &LandmarkFile::from(mesh))
}

pub fn load_landmarks<T: Scalar>(path: impl AsRef<Path>) -> Result<LandmarkMesh<T>> {
    read_json::<LandmarkFile>(path)?.to_mesh()
}
