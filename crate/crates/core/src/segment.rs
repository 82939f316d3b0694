//! Promptable segmentation backends and the refinement loop.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::{json, Value};

use crate::backend::{BackendKind, WireClient};
use crate::error::{Error, Result};
use crate::formats::write_logits;
use crate::io::{load_mask, save_image};
use crate::prompt::{soften_mask, PromptSet};
use crate::scalar::Scalar;
use crate::tensor::{BinaryMask, Image};

pub const DEFAULT_MOCK_TOLERANCE: f64 = 0.1;

pub struct SegmentationRequest<'a> {
    pub sample_id: &'a str,
    pub image: &'a Image<f32>,
    pub prompts: &'a PromptSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub mask: BinaryMask,
    pub confidence: f64,
    /// 0 for the initial prediction, `r` after refinement round `r`.
    pub round: usize,
    /// Set when a refinement round failed and an earlier result was kept.
    pub warning: Option<String>,
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, req: &SegmentationRequest<'_>) -> Result<SegmentationResult>;
}

fn check_request(req: &SegmentationRequest<'_>) -> Result<()> {
    let p = req.prompts;
    if req.image.dims() != (p.height, p.width) {
        return Err(Error::dims(req.image.dims(), (p.height, p.width)));
    }
    let inside = |x: f64, y: f64| x >= 0.0 && y >= 0.0 && x < p.width as f64 && y < p.height as f64;
    if !p.points.iter().all(|q| inside(q.x, q.y)) || p.bbox.x_max >= p.width || p.bbox.y_max >= p.height {
        return Err(Error::InvalidInput(format!(
            "prompts of {} fall outside the image",
            req.sample_id
        )));
    }
    Ok(())
}

/// Deterministic region grower standing in for a real model.
#[derive(Debug, Clone, Copy)]
pub struct MockSegmenter {
    pub tolerance: f64,
}

impl Default for MockSegmenter {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_MOCK_TOLERANCE,
        }
    }
}

/// Grow a 4-connected region from the foreground point over pixels within
/// `tol` of the seed intensity, keep what lies in the box and drop pixels
/// under background points. Confidence is region area over box area.
/// Placeholder prompts yield an empty mask with zero confidence; mask logits
/// are ignored.
pub fn mock_segment<T: Scalar>(image: &Image<T>, prompts: &PromptSet, tol: f64) -> SegmentationResult {
    let (h, w) = image.dims();
    let empty = SegmentationResult {
        mask: BinaryMask::empty(h, w),
        confidence: 0.0,
        round: 0,
        warning: None,
    };
    if prompts.fallback {
        return empty;
    }
    let gray = image.grayscale();
    let (sx, sy) = prompts.foreground().pixel();
    if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
        return empty;
    }
    let (sx, sy) = (sx as usize, sy as usize);
    let seed = gray.get(sx, sy, 0).as_f64();
    let mut grown = BinaryMask::empty(h, w);
    grown.set(sx, sy, true);
    let mut queue = VecDeque::from([(sx, sy)]);
    while let Some((x, y)) = queue.pop_front() {
        let nbrs = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in nbrs {
            if nx < w && ny < h && !grown.get(nx, ny) && (gray.get(nx, ny, 0).as_f64() - seed).abs() <= tol {
                grown.set(nx, ny, true);
                queue.push_back((nx, ny));
            }
        }
    }
    let mut mask = BinaryMask::from_fn(h, w, |x, y| grown.get(x, y) && prompts.bbox.contains(x, y));
    for p in prompts.background() {
        let (px, py) = p.pixel();
        if px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h {
            mask.set(px as usize, py as usize, false);
        }
    }
    let confidence = (mask.count() as f64 / prompts.bbox.area() as f64).clamp(0.0, 1.0);
    SegmentationResult {
        mask,
        confidence,
        round: 0,
        warning: None,
    }
}

impl Segmenter for MockSegmenter {
    fn segment(&self, req: &SegmentationRequest<'_>) -> Result<SegmentationResult> {
        check_request(req)?;
        Ok(mock_segment(req.image, req.prompts, self.tolerance))
    }
}

/// Memoizes results by `(sample id, prompt digest)`.
pub struct CachedSegmenter<S> {
    inner: S,
    cache: Mutex<HashMap<(String, String), SegmentationResult>>,
}

impl<S: Segmenter> CachedSegmenter<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            cache: Mutex::default(),
        }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: Segmenter> Segmenter for CachedSegmenter<S> {
    fn segment(&self, req: &SegmentationRequest<'_>) -> Result<SegmentationResult> {
        let key = (req.sample_id.to_string(), req.prompts.digest());
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let res = self.inner.segment(req)?;
        self.cache.lock().expect("cache lock").insert(key, res.clone());
        Ok(res)
    }
}

/// Segmenter behind the wire protocol. Images and logit grids are written to
/// `work_dir` and referenced by path.
pub struct ExternalSegmenter {
    client: WireClient,
    work_dir: PathBuf,
    calls: AtomicUsize,
}

impl ExternalSegmenter {
    pub fn new(client: WireClient, work_dir: impl Into<PathBuf>) -> Result<Self> {
        client.require_kind(BackendKind::Segmenter)?;
        Ok(Self {
            client,
            work_dir: work_dir.into(),
            calls: AtomicUsize::new(0),
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Highest-confidence candidate of a result message. Accepts either a single
/// `mask`/`confidence` pair or a `masks` list of them; ties keep the first.
fn pick_mask(reply: &Value) -> Result<(PathBuf, f64)> {
    let one = |v: &Value| -> Result<(PathBuf, f64)> {
        let mask = v
            .get("mask")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Backend(format!("result lacks a mask path: {v}")))?;
        let conf = v.get("confidence").and_then(Value::as_f64).unwrap_or(0.0);
        if !conf.is_finite() {
            return Err(Error::NonFinite("backend confidence".into()));
        }
        Ok((PathBuf::from(mask), conf.clamp(0.0, 1.0)))
    };
    match reply.get("masks").and_then(Value::as_array) {
        Some(list) => {
            let mut best: Option<(PathBuf, f64)> = None;
            for v in list {
                let c = one(v)?;
                if best.as_ref().is_none_or(|b| c.1 > b.1) {
                    best = Some(c);
                }
            }
            best.ok_or_else(|| Error::Backend("empty candidate list".into()))
        }
        None => one(reply),
    }
}

impl Segmenter for ExternalSegmenter {
    fn segment(&self, req: &SegmentationRequest<'_>) -> Result<SegmentationResult> {
        check_request(req)?;
        let p = req.prompts;
        let image_path = self.work_dir.join(format!("{}.png", req.sample_id));
        if !image_path.exists() {
            save_image(req.image, &image_path)?;
        }
        let logits_path = if p.fallback {
            None
        } else {
            let path = self
                .work_dir
                .join(format!("{}.{}.mpal", req.sample_id, &p.digest()[..16]));
            write_logits(&p.mask_logits, &path)?;
            Some(path)
        };
        let msg = json!({
            "op": "segment",
            "image": image_path,
            "points": p.points.iter().map(|q| json!([q.x, q.y, q.label.as_u8()])).collect::<Vec<_>>(),
            "box": [p.bbox.x_min, p.bbox.y_min, p.bbox.x_max, p.bbox.y_max],
            "mask_logits": logits_path,
        });
        self.calls.fetch_add(1, Ordering::Relaxed);
        let reply = self.client.request(req.sample_id, msg)?;
        let (mask_path, confidence) = pick_mask(&reply)?;
        let mask = load_mask(Path::new(&mask_path), None)?;
        if mask.dims() != req.image.dims() {
            return Err(Error::dims(req.image.dims(), mask.dims()));
        }
        Ok(SegmentationResult {
            mask,
            confidence,
            round: 0,
            warning: None,
        })
    }
}

/// Feed the previous prediction back as the mask prompt `rounds` times,
/// keeping points and box. A failing round stops the loop and returns the
/// last good result with a warning.
pub fn refine(
    backend: &dyn Segmenter,
    sample_id: &str,
    image: &Image<f32>,
    prompts: &PromptSet,
    prev: SegmentationResult,
    rounds: usize,
    soften_scale: f64,
) -> SegmentationResult {
    let mut last = prev;
    for round in 1..=rounds {
        let mut next = prompts.clone();
        next.mask_logits = soften_mask(&last.mask, soften_scale);
        let req = SegmentationRequest {
            sample_id,
            image,
            prompts: &next,
        };
        match backend.segment(&req) {
            Ok(mut r) => {
                r.round = round;
                last = r;
            }
            Err(e) => {
                log::warn!("{sample_id}: refinement round {round} failed: {e}");
                last.warning = Some(format!("refinement round {round} failed: {e}"));
                break;
            }
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{fallback_prompts, generate_prompts, PromptConfig};
    use crate::tensor::BBox;

    fn disk_image(n: usize, cx: f64, cy: f64, r: f64) -> (Image<f32>, BinaryMask) {
        let inside = |x: usize, y: usize| (x as f64 - cx).hypot(y as f64 - cy) <= r;
        let img = Image::new(n, n, 1, (0..n * n).map(|k| if inside(k % n, k / n) { 0.8 } else { 0.2 }).collect()).unwrap();
        (img, BinaryMask::from_fn(n, n, inside))
    }

    /// Independent flood fill by recursion on an explicit stack.
    fn flood(img: &Image<f32>, sx: usize, sy: usize, tol: f32) -> BinaryMask {
        let (h, w) = img.dims();
        let mut seen = vec![false; h * w];
        let mut stack = vec![(sx, sy)];
        let seed = img.get(sx, sy, 0);
        while let Some((x, y)) = stack.pop() {
            if seen[y * w + x] || (img.get(x, y, 0) - seed).abs() > tol {
                continue;
            }
            seen[y * w + x] = true;
            if x > 0 {
                stack.push((x - 1, y));
            }
            if y > 0 {
                stack.push((x, y - 1));
            }
            if x + 1 < w {
                stack.push((x + 1, y));
            }
            if y + 1 < h {
                stack.push((x, y + 1));
            }
        }
        BinaryMask::from_fn(h, w, |x, y| seen[y * w + x])
    }

    #[test]
    fn mock_recovers_disk_within_box() {
        let (img, disk) = disk_image(64, 30.0, 33.0, 12.0);
        let prompts = generate_prompts(&disk.to_soft::<f32>(), &PromptConfig::default());
        let r = mock_segment(&img, &prompts, 0.1);
        let oracle = flood(&img, 30, 33, 0.1);
        let expect = BinaryMask::from_fn(64, 64, |x, y| {
            oracle.get(x, y) && prompts.bbox.contains(x, y) && !prompts.background().any(|p| p.pixel() == (x as i64, y as i64))
        });
        assert_eq!(r.mask, expect);
        assert_eq!(r.mask, disk);
        assert!((r.confidence - disk.count() as f64 / prompts.bbox.area() as f64).abs() < 1e-12);
    }

    #[test]
    fn background_seed_excludes_object() {
        let (img, disk) = disk_image(32, 16.0, 16.0, 6.0);
        let mut prompts = fallback_prompts(32, 32);
        prompts.fallback = false;
        prompts.points[0].x = 2.0;
        prompts.points[0].y = 2.0;
        prompts.bbox = BBox::new(0, 0, 31, 31).unwrap();
        let r = mock_segment(&img, &prompts, 0.1);
        assert!(r.mask.foreground().all(|(x, y)| !disk.get(x, y)));
    }

    #[test]
    fn box_inside_object_gives_box() {
        let (img, _) = disk_image(64, 32.0, 32.0, 25.0);
        let mut prompts = fallback_prompts(64, 64);
        prompts.fallback = false;
        prompts.bbox = BBox::new(25, 25, 38, 38).unwrap();
        prompts.points = vec![crate::tensor::Point::foreground(31.0, 31.0)];
        let r = mock_segment(&img, &prompts, 0.1);
        assert_eq!(r.mask, BinaryMask::from_fn(64, 64, |x, y| prompts.bbox.contains(x, y)));
        assert_eq!(r.confidence, 1.0);
    }

    #[test]
    fn fallback_on_blank_image_is_empty() {
        let img = Image::<f32>::filled(32, 32, 0.5).unwrap();
        let r = mock_segment(&img, &fallback_prompts(32, 32), 0.1);
        assert!(r.mask.is_empty());
        assert_eq!(r.confidence, 0.0);
    }

    struct Counting<S>(S, AtomicUsize);

    impl<S: Segmenter> Segmenter for Counting<S> {
        fn segment(&self, req: &SegmentationRequest<'_>) -> Result<SegmentationResult> {
            self.1.fetch_add(1, Ordering::SeqCst);
            self.0.segment(req)
        }
    }

    #[test]
    fn refine_rounds_and_call_counts() {
        let (img, disk) = disk_image(48, 24.0, 24.0, 9.0);
        let prompts = generate_prompts(&disk.to_soft::<f32>(), &PromptConfig::default());
        let backend = Counting(MockSegmenter::default(), AtomicUsize::new(0));
        let req = SegmentationRequest {
            sample_id: "q",
            image: &img,
            prompts: &prompts,
        };
        let r0 = backend.segment(&req).unwrap();
        let same = refine(&backend, "q", &img, &prompts, r0.clone(), 0, 0.5);
        assert_eq!(same, r0);
        assert_eq!(backend.1.load(Ordering::SeqCst), 1);
        let r1 = refine(&backend, "q", &img, &prompts, r0.clone(), 1, 0.5);
        assert_eq!(backend.1.load(Ordering::SeqCst), 2);
        assert_eq!(r1.mask, r0.mask);
        assert_eq!(r1.round, 1);
    }

    struct FailSecond(AtomicUsize);

    impl Segmenter for FailSecond {
        fn segment(&self, req: &SegmentationRequest<'_>) -> Result<SegmentationResult> {
            if self.0.fetch_add(1, Ordering::SeqCst) >= 1 {
                return Err(Error::Backend("down".into()));
            }
            MockSegmenter::default().segment(req)
        }
    }

    #[test]
    fn refine_failure_keeps_last_result_with_warning() {
        let (img, disk) = disk_image(32, 16.0, 16.0, 6.0);
        let prompts = generate_prompts(&disk.to_soft::<f32>(), &PromptConfig::default());
        let backend = FailSecond(AtomicUsize::new(0));
        let r0 = MockSegmenter::default()
            .segment(&SegmentationRequest {
                sample_id: "q",
                image: &img,
                prompts: &prompts,
            })
            .unwrap();
        let r = refine(&backend, "q", &img, &prompts, r0.clone(), 3, 0.5);
        assert_eq!(r.round, 1);
        assert!(r.warning.as_deref().unwrap().contains("round 2"));
        assert_eq!(r.mask, r0.mask);
    }

    #[test]
    fn cache_returns_identical_results() {
        let (img, disk) = disk_image(32, 16.0, 16.0, 6.0);
        let prompts = generate_prompts(&disk.to_soft::<f32>(), &PromptConfig::default());
        let cached = CachedSegmenter::new(Counting(MockSegmenter::default(), AtomicUsize::new(0)));
        let req = SegmentationRequest {
            sample_id: "q",
            image: &img,
            prompts: &prompts,
        };
        let a = cached.segment(&req).unwrap();
        let b = cached.segment(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(cached.inner().1.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn mismatched_prompt_dimensions_error() {
        let img = Image::<f32>::filled(16, 16, 0.5).unwrap();
        let prompts = fallback_prompts(20, 20);
        let req = SegmentationRequest {
            sample_id: "q",
            image: &img,
            prompts: &prompts,
        };
        assert!(MockSegmenter::default().segment(&req).is_err());
    }

    #[test]
    fn candidate_choice_prefers_confidence() {
        let reply = json!({"masks": [{"mask": "a.png", "confidence": 0.4}, {"mask": "b.png", "confidence": 0.9}, {"mask": "c.png", "confidence": 0.9}]});
        assert_eq!(pick_mask(&reply).unwrap(), (PathBuf::from("b.png"), 0.9));
        assert!(pick_mask(&json!({"confidence": 1.0})).is_err());
    }
}
