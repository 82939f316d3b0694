//! Point, box and mask prompts derived from a coarse mask.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::{encode_logits, read_logits, write_bytes, write_logits};
use crate::geometry::{bounding_box, centroid, largest_component, signed_distance, Connectivity};
use crate::scalar::Scalar;
use crate::tensor::{BBox, BinaryMask, Plane, Point, PointLabel, SoftMask};

pub const LOGIT_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    /// Pixels added on every side of the tight box before clipping.
    pub expand_margin: usize,
    /// Logit per pixel of signed distance.
    pub soften_scale: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            expand_margin: 0,
            soften_scale: 0.5,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.soften_scale > 0.0 && self.soften_scale.is_finite()) {
            return Err(Error::Config("prompt.soften_scale must be positive".into()));
        }
        Ok(())
    }
}

/// One foreground point, four background corner points, a box and a mask
/// logit grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub height: usize,
    pub width: usize,
    pub points: Vec<Point>,
    pub bbox: BBox,
    pub mask_logits: Plane<f32>,
    /// Set when the coarse mask was empty and the prompts are a placeholder.
    pub fallback: bool,
}

impl PromptSet {
    pub fn foreground(&self) -> &Point {
        self.points
            .iter()
            .find(|p| p.label == PointLabel::Foreground)
            .expect("prompt sets carry a foreground point")
    }

    pub fn background(&self) -> impl Iterator<Item = &Point> {
        self.points.iter().filter(|p| p.label == PointLabel::Background)
    }

    /// Content hash over everything a backend sees.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.header(String::new())).expect("plain data serializes"));
        h.update(encode_logits(&self.mask_logits));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn header(&self, mask_logits: String) -> PromptFile {
        PromptFile {
            height: self.height,
            width: self.width,
            points: self.points.iter().map(|p| (p.x, p.y, p.label.as_u8())).collect(),
            bbox: [self.bbox.x_min, self.bbox.y_min, self.bbox.x_max, self.bbox.y_max],
            mask_logits,
            fallback_flag: self.fallback,
        }
    }

    /// Sidecar logit file belonging to a prompt JSON path.
    pub fn sidecar_path(json_path: &Path) -> PathBuf {
        json_path.with_extension("mpal")
    }

    /// Write the JSON description and its logit sidecar next to it.
    pub fn write(&self, json_path: &Path) -> Result<()> {
        let sidecar = Self::sidecar_path(json_path);
        let name = sidecar
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::InvalidInput(format!("bad prompt path {}", json_path.display())))?
            .to_string();
        write_logits(&self.mask_logits, &sidecar)?;
        let mut text = serde_json::to_vec_pretty(&self.header(name)).expect("plain data serializes");
        text.push(b'\n');
        write_bytes(json_path, &text)
    }

    pub fn read(json_path: &Path) -> Result<Self> {
        let text = fs::read(json_path).map_err(|e| Error::io(json_path, e))?;
        let f: PromptFile = serde_json::from_slice(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", json_path.display())))?;
        let dir = json_path.parent().unwrap_or(Path::new(""));
        let logits = read_logits(&dir.join(&f.mask_logits))?;
        if (logits.height, logits.width) != (f.height, f.width) {
            return Err(Error::dims((f.height, f.width), (logits.height, logits.width)));
        }
        let points = f
            .points
            .iter()
            .map(|&(x, y, l)| {
                let label = PointLabel::from_u8(l).ok_or_else(|| Error::Format(format!("point label {l}")))?;
                Ok(Point { x, y, label })
            })
            .collect::<Result<Vec<_>>>()?;
        let [x0, y0, x1, y1] = f.bbox;
        Ok(Self {
            height: f.height,
            width: f.width,
            points,
            bbox: BBox::new(x0, y0, x1, y1)?,
            mask_logits: logits,
            fallback: f.fallback_flag,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptFile {
    height: usize,
    width: usize,
    points: Vec<(f64, f64, u8)>,
    #[serde(rename = "box")]
    bbox: [usize; 4],
    mask_logits: String,
    fallback_flag: bool,
}

/// `clamp(scale · signed_distance, ±20)` per pixel.
pub fn soften_mask(hard: &BinaryMask, scale: f64) -> Plane<f32> {
    signed_distance(hard).map(|&d| (scale * d).clamp(-LOGIT_CLAMP, LOGIT_CLAMP) as f32)
}

/// Placeholder prompts for a query whose coarse mask vanished: the image
/// center and a box over its central half.
pub fn fallback_prompts(height: usize, width: usize) -> PromptSet {
    let bbox = BBox {
        x_min: width / 4,
        y_min: height / 4,
        x_max: (3 * width / 4).saturating_sub(1).max(width / 4),
        y_max: (3 * height / 4).saturating_sub(1).max(height / 4),
    };
    let mut points = vec![Point::foreground((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)];
    points.extend(bbox.corners().iter().map(|&(x, y)| Point::background(x as f64, y as f64)));
    PromptSet {
        height,
        width,
        points,
        bbox,
        mask_logits: Plane::filled(height, width, 0.0),
        fallback: true,
    }
}

/// Point inside `region`: its centroid when that lands on the region, the
/// deepest pixel of the region otherwise (first in raster order on ties).
pub fn interior_point(region: &BinaryMask) -> Result<Point> {
    let c = centroid(region)?;
    if region.contains_point(c.x, c.y) {
        return Ok(c);
    }
    let sd = signed_distance(region);
    let mut best: Option<(usize, usize, f64)> = None;
    for (x, y) in region.foreground() {
        let d = sd.get(x, y);
        if best.is_none_or(|(_, _, b)| d > b) {
            best = Some((x, y, d));
        }
    }
    let (x, y, _) = best.ok_or(Error::EmptyMask)?;
    Ok(Point::foreground(x as f64, y as f64))
}

pub fn generate_prompts<T: Scalar>(coarse: &SoftMask<T>, cfg: &PromptConfig) -> PromptSet {
    let (h, w) = coarse.dims();
    let region = largest_component(&coarse.threshold(), Connectivity::Four);
    if region.is_empty() {
        return fallback_prompts(h, w);
    }
    let fg = interior_point(&region).expect("non-empty region");
    let bbox = bounding_box(&region)
        .expect("non-empty region")
        .expand(cfg.expand_margin, h, w);
    let mut points = vec![fg];
    points.extend(bbox.corners().iter().map(|&(x, y)| Point::background(x as f64, y as f64)));
    PromptSet {
        height: h,
        width: w,
        points,
        bbox,
        mask_logits: soften_mask(&region, cfg.soften_scale),
        fallback: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square() -> BinaryMask {
        BinaryMask::from_fn(256, 256, |x, y| (64..=191).contains(&x) && (64..=191).contains(&y))
    }

    #[test]
    fn square_prompts() {
        let p = generate_prompts(&square().to_soft::<f32>(), &PromptConfig::default());
        assert!(!p.fallback);
        assert_eq!(*p.foreground(), Point::foreground(127.5, 127.5));
        assert_eq!(p.bbox, BBox::new(64, 64, 191, 191).unwrap());
        let bg: Vec<(f64, f64)> = p.background().map(|q| (q.x, q.y)).collect();
        assert_eq!(bg, vec![(64.0, 64.0), (191.0, 64.0), (64.0, 191.0), (191.0, 191.0)]);
    }

    #[test]
    fn expanded_box_is_clipped() {
        let m = BinaryMask::from_fn(32, 32, |x, y| x < 10 && (5..20).contains(&y));
        let p = generate_prompts(
            &m.to_soft::<f32>(),
            &PromptConfig {
                expand_margin: 8,
                ..Default::default()
            },
        );
        assert_eq!(p.bbox, BBox::new(0, 0, 17, 27).unwrap());
        assert!(p.background().all(|q| p.bbox.contains_point(q)));
    }

    #[test]
    fn concave_mask_uses_deepest_pixel() {
        // C shape opening to the right; the centroid lies in the cavity.
        let m = BinaryMask::from_fn(64, 64, |x, y| {
            let ring = (10..54).contains(&x) && (10..54).contains(&y);
            let hole = (22..64).contains(&x) && (22..42).contains(&y);
            ring && !hole
        });
        let c = centroid(&m).unwrap();
        assert!(!m.contains_point(c.x, c.y));
        let p = generate_prompts(&m.to_soft::<f32>(), &PromptConfig::default());
        let fg = p.foreground();
        assert!(m.contains_point(fg.x, fg.y));
        let sd = signed_distance(&m);
        let max = m.foreground().map(|(x, y)| sd.get(x, y)).fold(f64::MIN, f64::max);
        assert_eq!(sd.get(fg.x as usize, fg.y as usize), max);
    }

    #[test]
    fn empty_mask_falls_back() {
        let p = generate_prompts(&SoftMask::<f32>::new(256, 256, vec![0.2; 256 * 256]).unwrap(), &PromptConfig::default());
        assert!(p.fallback);
        assert_eq!(*p.foreground(), Point::foreground(127.5, 127.5));
        assert_eq!(p.bbox, BBox::new(64, 64, 191, 191).unwrap());
        assert!(p.mask_logits.data.iter().all(|&v| v == 0.0));
        assert_eq!(p.background().count(), 4);
    }

    #[test]
    fn tiny_image_fallback_is_valid() {
        let p = fallback_prompts(1, 1);
        assert_eq!(p.bbox, BBox::new(0, 0, 0, 0).unwrap());
        assert!(p.bbox.contains_point(p.foreground()));
    }

    #[test]
    fn soften_examples() {
        let m = BinaryMask::from_fn(101, 101, |x, y| (10..=90).contains(&x) && (10..=90).contains(&y));
        let l = soften_mask(&m, 0.5);
        assert_eq!(l.get(50, 50), 20.0);
        // edge pixels sit one pixel from the nearest background center
        assert_eq!(l.get(10, 50), 0.5);
        assert_eq!(l.get(9, 50), -0.5);
        assert_eq!(l.get(6, 50), -2.0);
        let sigma = 1.0 / (1.0 + (2.0f64).exp());
        assert!((sigma - 0.119).abs() < 1e-3);
    }

    #[test]
    fn prompt_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts/q1.json");
        let p = generate_prompts(&square().to_soft::<f32>(), &PromptConfig::default());
        p.write(&path).unwrap();
        let back = PromptSet::read(&path).unwrap();
        assert_eq!(back, p);
        let first = fs::read(&path).unwrap();
        back.write(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert_eq!(back.digest(), p.digest());
        let text: serde_json::Value = serde_json::from_slice(&first).unwrap();
        assert_eq!(text["box"], serde_json::json!([64, 64, 191, 191]));
        assert_eq!(text["points"][0], serde_json::json!([127.5, 127.5, 1]));
        assert_eq!(text["mask_logits"], "q1.mpal");
    }

    fn blobs(h: usize, w: usize, seeds: &[(usize, usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(h, w, |x, y| {
            seeds.iter().any(|&(cx, cy, r)| {
                let (dx, dy) = (x as i64 - cx as i64, y as i64 - cy as i64);
                dx * dx + dy * dy <= (r * r) as i64
            })
        })
    }

    proptest! {
        #[test]
        fn foreground_point_is_interior(
            seeds in proptest::collection::vec((0usize..48, 0usize..48, 1usize..12), 1..5),
            notch in 0usize..48,
        ) {
            let mut m = blobs(48, 48, &seeds);
            for y in 0..48 {
                m.set(notch, y, false);
            }
            let p = generate_prompts(&m.to_soft::<f32>(), &PromptConfig::default());
            if !p.fallback {
                let fg = *p.foreground();
                prop_assert!(m.contains_point(fg.x, fg.y));
                prop_assert!(p.bbox.contains_point(&fg));
                prop_assert_eq!(p.points.len(), 5);
            }
        }

        #[test]
        fn softened_mask_thresholds_back(
            seeds in proptest::collection::vec((0usize..40, 0usize..40, 0usize..10), 0..4),
        ) {
            let m = blobs(40, 40, &seeds);
            let l = soften_mask(&m, 0.5);
            let back = BinaryMask::from_fn(40, 40, |x, y| 1.0 / (1.0 + (-l.get(x, y) as f64).exp()) >= 0.5);
            prop_assert_eq!(back, m);
        }

        #[test]
        fn prompts_translate_with_the_mask(
            (cx, cy, r) in (20usize..40, 20usize..40, 3usize..10),
            (dx, dy) in (0usize..10, 0usize..10),
        ) {
            let a = blobs(64, 64, &[(cx, cy, r)]);
            let b = blobs(64, 64, &[(cx + dx, cy + dy, r)]);
            let pa = generate_prompts(&a.to_soft::<f32>(), &PromptConfig::default());
            let pb = generate_prompts(&b.to_soft::<f32>(), &PromptConfig::default());
            for (qa, qb) in pa.points.iter().zip(&pb.points) {
                prop_assert!((qb.x - qa.x - dx as f64).abs() < 1e-9);
                prop_assert!((qb.y - qa.y - dy as f64).abs() < 1e-9);
            }
            prop_assert_eq!(pb.bbox.x_min, pa.bbox.x_min + dx);
            prop_assert_eq!(pb.bbox.y_max, pa.bbox.y_max + dy);
        }
    }
}
