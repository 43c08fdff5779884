//! Synthetic cross-domain image suite and its on-disk format.
//!
//! Every domain draws the same class-indexed foreground shapes; domains
//! differ only in shift knobs (palette rotation, background texture
//! family, channel drop, contrast inversion). Class identity is purely
//! geometric, so a perfect shape classifier would score 100% on every
//! domain, while color/texture shortcuts learned on the source break
//! down under the knobs.
//!
//! On-disk layout, all integers little-endian:
//!
//! ```text
//! magic  b"RLDS", version u32
//! header: class_count u32, image count u64, channels u32, H u32, W u32
//! per record: class u32, domain-name length u32 + UTF-8 bytes,
//!             pixels f32 * (channels*H*W)
//! ```
//!
//! Pixels are quantized through f32 at generation time so the in-memory
//! f64 values survive the f32 file format bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;

pub const MAGIC: &[u8; 4] = b"RLDS";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"RLDS\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported dataset version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated or malformed dataset: {0}")]
    Malformed(String),
    #[error("integrity error: {0}")]
    Integrity(String),
}

/// Generator settings for one domain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub class_count: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Hue rotation in degrees applied to every palette color.
    pub palette_rotation_deg: f64,
    /// Background texture family (0 = smooth gradient, 1 = stripes,
    /// 2 = blobs, 3 = rings).
    pub texture_family: u32,
    /// Collapse to a single luminance channel replicated 3x.
    pub channel_drop: bool,
    /// Map pixel values x -> 1 - x after all other knobs.
    pub contrast_invert: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// `[channels, H, W]` row-major, values in [0, 1] and exactly
    /// representable as f32.
    pub pixels: Vec<f64>,
    pub class: usize,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    /// Indices of records grouped by class.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count];
        for (i, r) in self.records.iter().enumerate() {
            groups[r.class].push(i);
        }
        groups
    }

    pub fn pixels_per_image(&self) -> usize {
        self.channels * self.height * self.width
    }
}

// ----------------------------------------------------------------------
// Procedural drawing
// ----------------------------------------------------------------------

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn point_in_polygon(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if ((yi > py) != (yj > py)) && (px < (xj - xi) * (py - yi) / (yj - yi) + xi) {
            inside = !inside;
        }
        j = i;
    }
    inside
}

struct Shape {
    kind: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    rotation: f64,
    verts: Vec<(f64, f64)>,
}

impl Shape {
    fn new(class: usize, size: f64, rng: &mut RngStream) -> Shape {
        let kind = class % 8;
        let cx = size * (0.5 + rng.next_range(-0.12, 0.12));
        let cy = size * (0.5 + rng.next_range(-0.12, 0.12));
        // Classes beyond the 8 base kinds reuse them at reduced scale.
        let shrink = 1.0 - 0.12 * (class / 8) as f64;
        let radius = size * rng.next_range(0.30, 0.40) * shrink;
        let rotation = rng.next_range(0.0, std::f64::consts::TAU);
        let verts = match kind {
            0 | 1 | 2 | 3 => {
                // regular k-gon: triangle, square, pentagon, hexagon
                let k = kind + 3;
                (0..k)
                    .map(|i| {
                        let a = rotation + std::f64::consts::TAU * i as f64 / k as f64;
                        (cx + radius * a.cos(), cy + radius * a.sin())
                    })
                    .collect()
            }
            7 => {
                // five-point star: alternate outer/inner radii
                (0..10)
                    .map(|i| {
                        let a = rotation + std::f64::consts::TAU * i as f64 / 10.0;
                        let r = if i % 2 == 0 { radius } else { radius * 0.45 };
                        (cx + r * a.cos(), cy + r * a.sin())
                    })
                    .collect()
            }
            _ => Vec::new(), // disc, ring, plus: analytic tests
        };
        Shape {
            kind,
            cx,
            cy,
            radius,
            rotation,
            verts,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self.kind {
            0 | 1 | 2 | 3 | 7 => point_in_polygon(x, y, &self.verts),
            4 => {
                let (dx, dy) = (x - self.cx, y - self.cy);
                dx * dx + dy * dy <= self.radius * self.radius
            }
            5 => {
                let (dx, dy) = (x - self.cx, y - self.cy);
                let d2 = dx * dx + dy * dy;
                let inner = self.radius * 0.55;
                d2 <= self.radius * self.radius && d2 >= inner * inner
            }
            6 => {
                // plus: two rotated bars
                let (dx, dy) = (x - self.cx, y - self.cy);
                let (c, s) = (self.rotation.cos(), self.rotation.sin());
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let bar = self.radius * 0.34;
                (u.abs() <= bar && v.abs() <= self.radius)
                    || (v.abs() <= bar && u.abs() <= self.radius)
            }
            _ => unreachable!(),
        }
    }
}

fn texture_value(family: u32, x: f64, y: f64, size: f64, phase: [f64; 3], freq: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let (fx, fy) = (x / size, y / size);
    match family {
        0 => 0.5 * (tau * (0.7 * fx + 0.5 * fy) * freq + phase[0]).sin(),
        1 => (tau * (fx + fy) * freq + phase[0]).sin().signum() * 0.5
            + 0.15 * (tau * fx * freq + phase[1]).sin(),
        2 => {
            let a = (tau * fx * freq + phase[0]).sin();
            let b = (tau * fy * freq + phase[1]).sin();
            (a * b).tanh() * 1.2
        }
        _ => {
            let cx = 0.5 + 0.2 * phase[2].sin();
            let cy = 0.5 + 0.2 * phase[2].cos();
            let r = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            (tau * r * freq * 1.5 + phase[0]).sin()
        }
    }
}

/// Render every image of a domain. Deterministic for a given spec.
pub fn generate_domain(spec: &DomainSpec) -> Dataset {
    let size = spec.image_size;
    let base = RngStream::new(spec.seed, "domain-images");
    let mut records = Vec::with_capacity(spec.class_count * spec.images_per_class);
    for class in 0..spec.class_count {
        for idx in 0..spec.images_per_class {
            let mut rng = base.fork("img", (class * spec.images_per_class + idx) as u64);
            records.push(render_image(spec, class, size, &mut rng));
        }
    }
    Dataset {
        class_count: spec.class_count,
        channels: 3,
        height: size,
        width: size,
        records,
    }
}

fn render_image(spec: &DomainSpec, class: usize, size: usize, rng: &mut RngStream) -> ImageRecord {
    let s = size as f64;
    let shape = Shape::new(class, s, rng);

    // Color carries no class information anywhere: the foreground hue is
    // drawn per image from a domain palette band, so shape geometry is
    // the only class signal and the palette knob is a pure domain shift.
    let fg_hue = 30.0 + rng.next_range(-55.0, 55.0) + spec.palette_rotation_deg;
    let fg_sat = rng.next_range(0.70, 0.95);
    let fg_val = rng.next_range(0.75, 0.95);
    let bg_hue = 205.0 + rng.next_range(-25.0, 25.0) + spec.palette_rotation_deg;
    let bg_sat = rng.next_range(0.25, 0.45);
    let bg_val = rng.next_range(0.35, 0.55);
    let phase = [
        rng.next_range(0.0, std::f64::consts::TAU),
        rng.next_range(0.0, std::f64::consts::TAU),
        rng.next_range(0.0, std::f64::consts::TAU),
    ];
    let freq = rng.next_range(1.5, 3.0);

    let fg = hsv_to_rgb(fg_hue, fg_sat, fg_val);
    let mut pixels = vec![0.0f64; 3 * size * size];
    for py in 0..size {
        for px in 0..size {
            // 2x2 subsample coverage for soft shape edges
            let mut cover = 0.0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                if shape.contains(px as f64 + ox, py as f64 + oy) {
                    cover += 0.25;
                }
            }
            let tex = texture_value(
                spec.texture_family,
                px as f64 + 0.5,
                py as f64 + 0.5,
                s,
                phase,
                freq,
            );
            let bg = hsv_to_rgb(bg_hue + 8.0 * tex, bg_sat, (bg_val + 0.15 * tex).clamp(0.0, 1.0));
            for c in 0..3 {
                let v = cover * fg[c] + (1.0 - cover) * bg[c];
                pixels[(c * size + py) * size + px] = v;
            }
        }
    }

    // Per-pixel jitter so no two patches are ever numerically identical.
    for v in pixels.iter_mut() {
        *v = (*v + rng.next_range(-0.01, 0.01)).clamp(0.0, 1.0);
    }

    if spec.channel_drop {
        let plane = size * size;
        for i in 0..plane {
            let lum =
                0.299 * pixels[i] + 0.587 * pixels[plane + i] + 0.114 * pixels[2 * plane + i];
            pixels[i] = lum;
            pixels[plane + i] = lum;
            pixels[2 * plane + i] = lum;
        }
    }
    if spec.contrast_invert {
        for v in pixels.iter_mut() {
            *v = 1.0 - *v;
        }
    }
    // Quantize through f32 so the RLDS round trip is bit-exact.
    for v in pixels.iter_mut() {
        *v = *v as f32 as f64;
    }

    ImageRecord {
        pixels,
        class,
        domain: spec.name.clone(),
    }
}

/// The default experiment suite: one source domain and three targets
/// with strictly increasing shift (palette rotation, then texture swap,
/// then grayscale + inversion on top).
pub fn default_suite(seed: u64) -> (DomainSpec, Vec<DomainSpec>) {
    let source = DomainSpec {
        name: "source".into(),
        class_count: 8,
        images_per_class: 200,
        image_size: 32,
        palette_rotation_deg: 0.0,
        texture_family: 0,
        channel_drop: false,
        contrast_invert: false,
        seed,
    };
    let t1 = DomainSpec {
        name: "t1_palette".into(),
        class_count: 5,
        images_per_class: 40,
        image_size: 32,
        palette_rotation_deg: 130.0,
        texture_family: 0,
        channel_drop: false,
        contrast_invert: false,
        seed: seed.wrapping_add(101),
    };
    let t2 = DomainSpec {
        name: "t2_texture".into(),
        palette_rotation_deg: 130.0,
        texture_family: 2,
        seed: seed.wrapping_add(202),
        ..t1.clone()
    };
    let t3 = DomainSpec {
        name: "t3_grayinvert".into(),
        palette_rotation_deg: 130.0,
        texture_family: 2,
        channel_drop: true,
        contrast_invert: true,
        seed: seed.wrapping_add(303),
        ..t1.clone()
    };
    (source, vec![t1, t2, t3])
}

// ----------------------------------------------------------------------
// RLDS file format
// ----------------------------------------------------------------------

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let ppi = ds.pixels_per_image();
    let mut write = || -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(ds.class_count as u32).to_le_bytes())?;
        w.write_all(&(ds.records.len() as u64).to_le_bytes())?;
        w.write_all(&(ds.channels as u32).to_le_bytes())?;
        w.write_all(&(ds.height as u32).to_le_bytes())?;
        w.write_all(&(ds.width as u32).to_le_bytes())?;
        for r in &ds.records {
            w.write_all(&(r.class as u32).to_le_bytes())?;
            w.write_all(&(r.domain.len() as u32).to_le_bytes())?;
            w.write_all(r.domain.as_bytes())?;
            debug_assert_eq!(r.pixels.len(), ppi);
            for &v in &r.pixels {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()
    };
    write().map_err(io_err)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| DataError::Malformed("file shorter than header".into()))?;
    if &magic != MAGIC {
        return Err(DataError::BadMagic { found: magic });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(DataError::Version { found: version });
    }
    let class_count = read_u32(&mut r)? as usize;
    let count = read_u64(&mut r)? as usize;
    let channels = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    let width = read_u32(&mut r)? as usize;
    if channels == 0 || height == 0 || width == 0 {
        return Err(DataError::Malformed("zero-sized image dimensions".into()));
    }
    let ppi = channels * height * width;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let class = read_u32(&mut r)? as usize;
        if class >= class_count {
            return Err(DataError::Integrity(format!(
                "record {i}: class {class} >= header class_count {class_count}"
            )));
        }
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(DataError::Malformed(format!(
                "record {i}: implausible domain-name length {name_len}"
            )));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| DataError::Malformed(format!("record {i}: truncated domain name")))?;
        let domain = String::from_utf8(name)
            .map_err(|_| DataError::Malformed(format!("record {i}: domain name not UTF-8")))?;
        let mut pixels = vec![0.0f64; ppi];
        let mut buf = [0u8; 4];
        for v in pixels.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| DataError::Malformed(format!("record {i}: truncated pixels")))?;
            let f = f32::from_le_bytes(buf);
            if !f.is_finite() {
                return Err(DataError::Integrity(format!(
                    "record {i}: non-finite pixel"
                )));
            }
            *v = f as f64;
        }
        records.push(ImageRecord {
            pixels,
            class,
            domain,
        });
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail).map_err(io_err)? != 0 {
        return Err(DataError::Malformed("trailing bytes after records".into()));
    }
    Ok(Dataset {
        class_count,
        channels,
        height,
        width,
        records,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| DataError::Malformed("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, DataError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| DataError::Malformed("truncated u64".into()))?;
    Ok(u64::from_le_bytes(b))
}
