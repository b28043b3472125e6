//! PASCAL VOC annotation XML (annotations only, no pixel decoding).
//!
//! VOC corners are 1-based and inclusive: a box with `xmin = 1, xmax = 10`
//! covers ten pixels, so `w = xmax - xmin + 1` and `cx = (xmin + xmax) / 2`.

use std::fmt::Write as _;

use roxmltree::{Document, Node};

use crate::error::{AodError, Result};
use crate::geometry::BoundingBox;

#[derive(Clone, Debug, PartialEq)]
pub struct VocObject {
    pub name: String,
    pub bbox: BoundingBox,
    pub difficult: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VocAnnotation {
    pub filename: Option<String>,
    pub width: u32,
    pub height: u32,
    pub depth: Option<u32>,
    pub objects: Vec<VocObject>,
}

fn child<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn require<'a, 'i>(node: Node<'a, 'i>, name: &str, path: &str) -> Result<Node<'a, 'i>> {
    child(node, name).ok_or_else(|| AodError::parse(path, "missing element"))
}

fn text_of<'a>(node: Node<'a, '_>) -> &'a str {
    node.text().unwrap_or("").trim()
}

fn int_at(node: Node<'_, '_>, name: &str, path: &str) -> Result<i64> {
    let t = text_of(require(node, name, path)?);
    t.parse()
        .map_err(|_| AodError::parse(path, format!("expected an integer, found `{t}`")))
}

pub fn parse_voc_xml(document: &str) -> Result<VocAnnotation> {
    let doc = Document::parse(document).map_err(|e| AodError::parse("annotation", e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(AodError::parse("annotation", "root element is not <annotation>"));
    }
    let size = require(root, "size", "size")?;
    let dim = |name: &str| -> Result<u32> {
        let path = format!("size/{name}");
        let v = int_at(size, name, &path)?;
        u32::try_from(v).map_err(|_| AodError::parse(path, "out of range"))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let depth = match child(size, "depth") {
        Some(_) => Some(dim("depth")?),
        None => None,
    };
    let filename = child(root, "filename").map(|n| text_of(n).to_string());

    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = text_of(require(obj, "name", "object/name")?).to_string();
        let difficult = match child(obj, "difficult") {
            Some(_) => int_at(obj, "difficult", "object/difficult")? != 0,
            None => false,
        };
        let bb = require(obj, "bndbox", "object/bndbox")?;
        let corner = |n: &str| int_at(bb, n, &format!("object/bndbox/{n}"));
        let (xmin, ymin, xmax, ymax) = (corner("xmin")?, corner("ymin")?, corner("xmax")?, corner("ymax")?);
        if xmax < xmin || ymax < ymin {
            return Err(AodError::parse("object/bndbox", "max corner precedes min corner"));
        }
        let bbox = BoundingBox::new(
            (xmin + xmax) as f64 / 2.0,
            (ymin + ymax) as f64 / 2.0,
            (xmax - xmin + 1) as f64,
            (ymax - ymin + 1) as f64,
        )?;
        objects.push(VocObject { name, bbox, difficult });
    }
    Ok(VocAnnotation {
        filename,
        width,
        height,
        depth,
        objects,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Inverse of [`parse_voc_xml`] for boxes on the VOC integer grid.
pub fn render_voc_xml(a: &VocAnnotation) -> String {
    let mut s = String::from("<annotation>\n");
    if let Some(f) = &a.filename {
        let _ = writeln!(s, "  <filename>{}</filename>", escape(f));
    }
    let _ = writeln!(s, "  <size>\n    <width>{}</width>\n    <height>{}</height>", a.width, a.height);
    if let Some(d) = a.depth {
        let _ = writeln!(s, "    <depth>{d}</depth>");
    }
    s.push_str("  </size>\n");
    for o in &a.objects {
        let xmin = o.bbox.cx - (o.bbox.w - 1.0) / 2.0;
        let ymin = o.bbox.cy - (o.bbox.h - 1.0) / 2.0;
        let xmax = xmin + o.bbox.w - 1.0;
        let ymax = ymin + o.bbox.h - 1.0;
        let _ = write!(
            s,
            "  <object>\n    <name>{}</name>\n    <difficult>{}</difficult>\n    <bndbox>\n      \
             <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    \
             </bndbox>\n  </object>\n",
            escape(&o.name),
            u8::from(o.difficult),
            xmin.round() as i64,
            ymin.round() as i64,
            xmax.round() as i64,
            ymax.round() as i64,
        );
    }
    s.push_str("</annotation>\n");
    s
}
