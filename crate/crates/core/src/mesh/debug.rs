use std::fmt::Write as _;
use std::io;
use std::path::Path;

use super::ScreenMesh;

/// 2D wireframe of the mesh in pixel coordinates.
pub fn write_svg(mesh: &ScreenMesh, path: &Path) -> io::Result<()> {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {} {}" width="{}" height="{}">"#,
        mesh.width(),
        mesh.height(),
        mesh.width(),
        mesh.height()
    );
    let _ = writeln!(s, r#"<g fill="none" stroke="black" stroke-width="0.1">"#);
    for e in mesh.edges() {
        let a = mesh.position(mesh.from_vertex(e.halfedge(0)));
        let b = mesh.position(mesh.to_vertex(e.halfedge(0)));
        let color = if mesh.is_boundary_edge(e) {
            r#" stroke="red""#
        } else {
            ""
        };
        let _ = writeln!(
            s,
            r#"<line x1="{:.4}" y1="{:.4}" x2="{:.4}" y2="{:.4}"{color}/>"#,
            a.x, a.y, b.x, b.y
        );
    }
    s.push_str("</g>\n</svg>\n");
    std::fs::write(path, s)
}

/// The mesh as a flat OBJ with `z = 0`.
pub fn write_flat_obj(mesh: &ScreenMesh, path: &Path) -> io::Result<()> {
    let mut index = vec![0usize; mesh.vertex_capacity()];
    let mut s = String::new();
    for (i, v) in mesh.vertices().enumerate() {
        index[v.idx()] = i + 1;
        let p = mesh.position(v);
        let _ = writeln!(s, "v {} {} 0", p.x, p.y);
    }
    for f in mesh.faces() {
        let [a, b, c] = mesh.face_vertices(f);
        let _ = writeln!(s, "f {} {} {}", index[a.idx()], index[b.idx()], index[c.idx()]);
    }
    std::fs::write(path, s)
}
