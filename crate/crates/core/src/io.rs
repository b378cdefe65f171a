//! File formats: legacy VTK ASCII for meshes and nodal fields, CSV for all
//! tabular artifacts, and the persisted POD/DEIM basis layout.
//!
//! Floats are written with 17 significant digits so every file reads back
//! bit-exact.

use std::fs;
use std::path::Path;

use crate::control::ControlVector;
use crate::fem::FEField;
use crate::mesh::AdaptiveMesh;
use crate::pod::PodBasis;
use crate::{Error, Result};

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a mesh with optional nodal scalar fields as legacy VTK ASCII
/// (POINTS / CELLS / CELL_TYPES 5 / POINT_DATA).
pub fn write_vtk(
    path: &Path,
    mesh: &AdaptiveMesh,
    fields: &[(&str, &FEField)],
) -> Result<()> {
    let geom = mesh.geometry();
    for (_, f) in fields {
        f.check(geom)?;
    }
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    out.push_str("chopt field data\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    out.push_str(&format!("POINTS {} double\n", geom.n_vertices()));
    for p in geom.vertices() {
        out.push_str(&format!("{} {} 0.0\n", fmt(p[0]), fmt(p[1])));
    }
    out.push_str(&format!(
        "CELLS {} {}\n",
        geom.n_triangles(),
        4 * geom.n_triangles()
    ));
    for t in geom.triangles() {
        out.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    out.push_str(&format!("CELL_TYPES {}\n", geom.n_triangles()));
    for _ in 0..geom.n_triangles() {
        out.push_str("5\n");
    }
    if !fields.is_empty() {
        out.push_str(&format!("POINT_DATA {}\n", geom.n_vertices()));
        for (name, f) in fields {
            out.push_str(&format!("SCALARS {name} double 1\nLOOKUP_TABLE default\n"));
            for v in &f.coeffs {
                out.push_str(&fmt(*v));
                out.push('\n');
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads back a mesh (and named point fields) written by [`write_vtk`].
pub fn read_vtk(path: &Path) -> Result<(AdaptiveMesh, Vec<(String, Vec<f64>)>)> {
    let text = fs::read_to_string(path)?;
    let err = |msg: &str| Error::Parse {
        file: path.display().to_string(),
        msg: msg.into(),
    };
    let mut tokens = text.split_whitespace().peekable();
    let mut vertices: Vec<[f64; 2]> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    let mut fields: Vec<(String, Vec<f64>)> = Vec::new();
    while let Some(tok) = tokens.next() {
        match tok {
            "POINTS" => {
                let n: usize = tokens
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("bad POINTS count"))?;
                tokens.next(); // dtype
                for _ in 0..n {
                    let x: f64 = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err("bad point"))?;
                    let y: f64 = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err("bad point"))?;
                    tokens.next(); // z
                    vertices.push([x, y]);
                }
            }
            "CELLS" => {
                let n: usize = tokens
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("bad CELLS count"))?;
                tokens.next(); // total size
                for _ in 0..n {
                    let c: usize = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err("bad cell"))?;
                    if c != 3 {
                        return Err(err("only triangle cells supported"));
                    }
                    let mut tri = [0usize; 3];
                    for slot in &mut tri {
                        *slot = tokens
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| err("bad cell index"))?;
                    }
                    triangles.push(tri);
                }
            }
            "SCALARS" => {
                let name = tokens.next().ok_or_else(|| err("bad SCALARS"))?.to_string();
                tokens.next(); // dtype
                tokens.next(); // components
                tokens.next(); // LOOKUP_TABLE
                tokens.next(); // default
                let mut vals = Vec::with_capacity(vertices.len());
                for _ in 0..vertices.len() {
                    vals.push(
                        tokens
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| err("bad scalar"))?,
                    );
                }
                fields.push((name, vals));
            }
            _ => {}
        }
    }
    if vertices.is_empty() || triangles.is_empty() {
        return Err(err("no mesh in file"));
    }
    let mesh = AdaptiveMesh::from_vertices_triangles(vertices, triangles)?;
    Ok((mesh, fields))
}

/// Writes the control history: rows = time index, columns = components.
pub fn write_control_csv(path: &Path, u: &ControlVector) -> Result<()> {
    let mut out = String::new();
    out.push('k');
    for i in 0..u.n_components() {
        out.push_str(&format!(",u{i}"));
    }
    out.push('\n');
    for k in 0..=u.n_steps() {
        out.push_str(&k.to_string());
        for i in 0..u.n_components() {
            out.push(',');
            out.push_str(&fmt(u.get(i, k)));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_control_csv(path: &Path) -> Result<ControlVector> {
    let text = fs::read_to_string(path)?;
    let err = |msg: String| Error::Parse {
        file: path.display().to_string(),
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err("empty file".into()))?;
    let m = header.split(',').count() - 1;
    if m == 0 {
        return Err(err("no control columns".into()));
    }
    let mut values: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != m + 1 {
            return Err(err(format!(
                "line {}: expected {} cells",
                lineno + 2,
                m + 1
            )));
        }
        for c in &cells[1..] {
            values.push(
                c.parse()
                    .map_err(|e| err(format!("line {}: {e}", lineno + 2)))?,
            );
        }
        rows += 1;
    }
    if rows < 1 {
        return Err(err("no data rows".into()));
    }
    Ok(ControlVector::from_values(values, m, rows - 1))
}

/// Writes the per-step mass/energy log.
pub fn write_mass_energy_csv(
    path: &Path,
    traj: &crate::state::Trajectory,
    dt: f64,
) -> Result<()> {
    let mut out = String::from("step,time,mass,energy\n");
    for (k, s) in traj.steps.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            k,
            fmt(k as f64 * dt),
            fmt(s.mass),
            fmt(s.energy)
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes an optimizer iteration history in the shared schema.
pub fn write_history_csv(path: &Path, records: &[crate::optim::IterationRecord]) -> Result<()> {
    let mut out = String::from("k,J,gradnorm,s_k\n");
    for r in records {
        let step = r.step.map(fmt).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{step}\n",
            r.k,
            fmt(r.cost),
            fmt(r.grad_norm)
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Persists a POD basis: reference mesh as VTK, modes as a CSV matrix
/// (one row per vertex), eigenvalues as CSV, optional DEIM indices.
pub fn write_basis(dir: &Path, basis: &PodBasis, deim_indices: Option<&[usize]>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_vtk(&dir.join("reference_mesh.vtk"), &basis.mesh, &[])?;
    let n = basis.mesh.n_vertices();
    let mut modes = String::new();
    for i in 0..n {
        let row: Vec<String> = basis.modes.iter().map(|m| fmt(m.coeffs[i])).collect();
        modes.push_str(&row.join(","));
        modes.push('\n');
    }
    fs::write(dir.join("modes.csv"), modes)?;
    let mut eig = String::from("i,lambda\n");
    for (i, l) in basis.eigenvalues.iter().enumerate() {
        eig.push_str(&format!("{i},{}\n", fmt(*l)));
    }
    eig.push_str(&format!("tail,{}\n", fmt(basis.tail)));
    eig.push_str(&format!("total,{}\n", fmt(basis.total)));
    fs::write(dir.join("eigenvalues.csv"), eig)?;
    if let Some(idx) = deim_indices {
        let mut s = String::from("j,index\n");
        for (j, i) in idx.iter().enumerate() {
            s.push_str(&format!("{j},{i}\n"));
        }
        fs::write(dir.join("deim_indices.csv"), s)?;
    }
    Ok(())
}

/// Loads a persisted POD basis.
pub fn read_basis(dir: &Path) -> Result<PodBasis> {
    let (mesh, _) = read_vtk(&dir.join("reference_mesh.vtk"))?;
    let mesh = std::sync::Arc::new(mesh);
    let err = |msg: String| Error::Parse {
        file: dir.join("modes.csv").display().to_string(),
        msg,
    };
    let text = fs::read_to_string(dir.join("modes.csv"))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|c| c.parse::<f64>()).collect();
        rows.push(row.map_err(|e| err(e.to_string()))?);
    }
    if rows.len() != mesh.n_vertices() {
        return Err(err(format!(
            "modes have {} rows, mesh has {} vertices",
            rows.len(),
            mesh.n_vertices()
        )));
    }
    let ell = rows.first().map(|r| r.len()).unwrap_or(0);
    let modes: Vec<FEField> = (0..ell)
        .map(|j| FEField::new(rows.iter().map(|r| r[j]).collect(), mesh.id()))
        .collect();
    let eig_text = fs::read_to_string(dir.join("eigenvalues.csv"))?;
    let mut eigenvalues = Vec::new();
    let mut tail = 0.0;
    let mut total = 0.0;
    for line in eig_text.lines().skip(1) {
        let mut cells = line.split(',');
        let key = cells.next().unwrap_or("");
        let val: f64 = cells
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| err(format!("bad eigenvalue line: {line}")))?;
        match key {
            "tail" => tail = val,
            "total" => total = val,
            _ => eigenvalues.push(val),
        }
    }
    Ok(PodBasis {
        mesh,
        modes,
        eigenvalues,
        tail,
        total,
        truncated: 0,
    })
}
