//! Binary PPM (P6) previews for frames, label maps and flow fields.

use std::io::Write;

use super::{FlowField, LabelMap, Tensor, IGNORE};
use crate::error::{Error, Result};

pub enum ImageSource<'a> {
    /// C×H×W with C ∈ {1, 3}; values clamped to [0, 1].
    Frame(&'a Tensor),
    Labels(&'a LabelMap),
    Flow(&'a FlowField),
}

/// Fixed palette: entry i = ((67 i) mod 256, (113 i) mod 256, (197 i) mod 256).
pub fn label_color(id: u16) -> [u8; 3] {
    if id == IGNORE {
        return [0, 0, 0];
    }
    let i = id as u32;
    [
        ((i * 67) % 256) as u8,
        ((i * 113) % 256) as u8,
        ((i * 197) % 256) as u8,
    ]
}

fn to_byte(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn hsv_to_rgb(hue_deg: f64, sat: f64, val: f64) -> [f64; 3] {
    let c = val * sat;
    let hp = (hue_deg / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

fn flow_pixels(flow: &FlowField) -> Vec<u8> {
    let vals = flow.values();
    let max_mag = vals
        .chunks_exact(2)
        .map(|p| (p[0] as f64).hypot(p[1] as f64))
        .fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(vals.len() / 2 * 3);
    for p in vals.chunks_exact(2) {
        let (u, v) = (p[0] as f64, p[1] as f64);
        let mag = u.hypot(v);
        let value = if max_mag > 0.0 { mag / max_mag } else { 0.0 };
        let hue = v.atan2(u).to_degrees().rem_euclid(360.0);
        let rgb = hsv_to_rgb(hue, 1.0, value);
        out.extend(rgb.iter().map(|&c| to_byte(c as f32)));
    }
    out
}

/// Writes a P6 image and returns the number of bytes written.
pub fn emit_image<W: Write>(image: ImageSource<'_>, mut sink: W) -> Result<u64> {
    let (h, w, pixels) = match image {
        ImageSource::Frame(t) => {
            let shape = t.shape();
            if shape.len() != 3 {
                return Err(Error::shape(format!("frame must be C×H×W, got {shape:?}")));
            }
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let data = t.as_f32()?;
            let plane = h * w;
            let mut px = Vec::with_capacity(plane * 3);
            match c {
                1 => {
                    for &v in data {
                        let b = to_byte(v);
                        px.extend_from_slice(&[b, b, b]);
                    }
                }
                3 => {
                    for i in 0..plane {
                        for ch in 0..3 {
                            px.push(to_byte(data[ch * plane + i]));
                        }
                    }
                }
                _ => {
                    return Err(Error::shape(format!(
                        "unsupported channel count {c} (expected 1 or 3)"
                    )))
                }
            }
            (h, w, px)
        }
        ImageSource::Labels(l) => (
            l.height(),
            l.width(),
            l.values().iter().flat_map(|&v| label_color(v)).collect(),
        ),
        ImageSource::Flow(f) => (f.height(), f.width(), flow_pixels(f)),
    };
    let header = format!("P6\n{w} {h}\n255\n");
    let io = |offset: u64| move |source| Error::Io { offset, source };
    sink.write_all(header.as_bytes()).map_err(io(0))?;
    sink.write_all(&pixels)
        .map_err(io(header.len() as u64))?;
    let total = (header.len() + pixels.len()) as u64;
    sink.flush().map_err(io(total))?;
    Ok(total)
}
