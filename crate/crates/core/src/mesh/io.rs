//! Line-oriented text format for triangulations.
//!
//! ```text
//! trimesh 1
//! vertices N
//! x y        (N lines)
//! triangles M
//! i j k      (M lines)
//! boundary B (optional)
//! v          (B indices)
//! ```
//!
//! Tokens are whitespace separated and `#` starts a comment.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use super::{MeshError, Point, TriMesh};

pub fn write_mesh<W: Write>(mesh: &TriMesh, mut w: W) -> Result<(), MeshError> {
    writeln!(w, "trimesh 1")?;
    writeln!(w, "vertices {}", mesh.vertices().len())?;
    for v in mesh.vertices() {
        writeln!(w, "{:.16e} {:.16e}", v[0], v[1])?;
    }
    writeln!(w, "triangles {}", mesh.triangles().len())?;
    for t in mesh.triangles() {
        writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
    }
    writeln!(w, "boundary {}", mesh.boundary_vertices().len())?;
    for b in mesh.boundary_vertices() {
        writeln!(w, "{b}")?;
    }
    Ok(())
}

pub fn save_mesh(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_mesh(mesh, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh, MeshError> {
    read_mesh(BufReader::new(std::fs::File::open(path)?))
}

struct Tokens {
    items: Vec<(usize, String)>,
    pos: usize,
    last_line: usize,
}

impl Tokens {
    fn err(&self, line: usize, msg: impl Into<String>) -> MeshError {
        MeshError::Parse {
            line,
            msg: msg.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<(usize, &str), MeshError> {
        match self.items.get(self.pos) {
            Some((line, tok)) => {
                self.pos += 1;
                Ok((*line, tok.as_str()))
            }
            None => Err(self.err(self.last_line, format!("unexpected end of file, expected {what}"))),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), MeshError> {
        let (line, tok) = self.next(kw)?;
        if tok != kw {
            let msg = format!("expected '{kw}', found '{tok}'");
            return Err(self.err(line, msg));
        }
        Ok(())
    }

    fn number<T: FromStr>(&mut self, what: &str) -> Result<(usize, T), MeshError> {
        let (line, tok) = self.next(what)?;
        match tok.parse::<T>() {
            Ok(v) => Ok((line, v)),
            Err(_) => {
                let msg = format!("invalid {what} '{tok}'");
                Err(self.err(line, msg))
            }
        }
    }
}

pub fn read_mesh<R: BufRead>(r: R) -> Result<TriMesh, MeshError> {
    let mut items = Vec::new();
    let mut last_line = 0;
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        let content = line.split('#').next().unwrap_or("");
        for tok in content.split_whitespace() {
            items.push((k + 1, tok.to_string()));
        }
        last_line = k + 1;
    }
    let mut t = Tokens {
        items,
        pos: 0,
        last_line: last_line.max(1),
    };
    t.keyword("trimesh")?;
    let (line, version) = t.number::<u32>("version")?;
    if version != 1 {
        return Err(t.err(line, format!("unsupported version {version}")));
    }
    t.keyword("vertices")?;
    let (_, nv) = t.number::<usize>("vertex count")?;
    let mut vertices: Vec<Point> = Vec::with_capacity(nv.min(1 << 20));
    for _ in 0..nv {
        let (_, x) = t.number::<f64>("x coordinate")?;
        let (line, y) = t.number::<f64>("y coordinate")?;
        if !x.is_finite() || !y.is_finite() {
            return Err(t.err(line, "non-finite coordinate"));
        }
        vertices.push([x, y]);
    }
    t.keyword("triangles")?;
    let (_, nt) = t.number::<usize>("triangle count")?;
    let mut triangles = Vec::with_capacity(nt.min(1 << 20));
    for _ in 0..nt {
        let mut tri = [0usize; 3];
        let mut line = 0;
        for slot in &mut tri {
            let (l, v) = t.number::<usize>("vertex index")?;
            line = l;
            *slot = v;
        }
        if let Some(&bad) = tri.iter().find(|&&v| v >= nv) {
            return Err(t.err(
                line,
                format!("triangle index {bad} out of range for {nv} vertices"),
            ));
        }
        triangles.push(tri);
    }
    let boundary = if t.pos < t.items.len() {
        t.keyword("boundary")?;
        let (_, nb) = t.number::<usize>("boundary count")?;
        let mut b = Vec::with_capacity(nb.min(1 << 20));
        for _ in 0..nb {
            let (line, v) = t.number::<usize>("boundary index")?;
            if v >= nv {
                return Err(t.err(line, format!("boundary index {v} out of range")));
            }
            b.push(v);
        }
        Some(b)
    } else {
        None
    };
    if t.pos < t.items.len() {
        let (line, tok) = t.items[t.pos].clone();
        return Err(t.err(line, format!("unexpected trailing token '{tok}'")));
    }
    TriMesh::new(vertices, triangles, boundary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{mask_cells, triangulate_unit_square};

    fn round_trip(mesh: &TriMesh) -> TriMesh {
        let mut buf = Vec::new();
        write_mesh(mesh, &mut buf).unwrap();
        read_mesh(&buf[..]).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mesh = triangulate_unit_square(32, 32).unwrap();
        assert_eq!(round_trip(&mesh), mesh);
        // awkward coordinates survive 17 significant digits
        let odd = TriMesh::new(
            vec![[0.1, 1.0 / 3.0], [std::f64::consts::PI, 1e-300], [0.7, 2.0]],
            vec![[0, 1, 2]],
            None,
        )
        .unwrap();
        assert_eq!(round_trip(&odd), odd);
        let l = mask_cells(&mesh, |p| p[0] < 0.5 || p[1] < 0.5).unwrap();
        assert_eq!(round_trip(&l), l);
    }

    #[test]
    fn comments_and_missing_boundary() {
        let text = "# unit triangle\ntrimesh 1\nvertices 3 # count\n0 0\n1 0\n0 1\ntriangles 1\n0 1 2\n";
        let m = read_mesh(text.as_bytes()).unwrap();
        assert_eq!(m.boundary_vertices(), &[0, 1, 2]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad_index = "trimesh 1\nvertices 3\n0 0\n1 0\n0 1\ntriangles 1\n0 1 5\n";
        match read_mesh(bad_index.as_bytes()) {
            Err(MeshError::Parse { line, msg }) => {
                assert_eq!(line, 7);
                assert!(msg.contains("out of range"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            read_mesh("".as_bytes()),
            Err(MeshError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read_mesh("trimesh 1\nvertices 2\n0 0\n1 x\n".as_bytes()),
            Err(MeshError::Parse { line: 4, .. })
        ));
        assert!(matches!(
            read_mesh("trimesh 2\n".as_bytes()),
            Err(MeshError::Parse { line: 1, .. })
        ));
    }
}
