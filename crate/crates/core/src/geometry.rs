//! Mask geometry: centroid, bounding box, connected components and the signed
//! Euclidean distance transform.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BBox, BinaryMask, Plane, Point};

/// Pixel adjacency used for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        }
    }
}

/// Mean foreground coordinate, labeled foreground.
pub fn centroid(mask: &BinaryMask) -> Result<Point> {
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for (x, y) in mask.foreground() {
        sx += x as f64;
        sy += y as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(Point::foreground(sx / n as f64, sy / n as f64))
}

/// Tight inclusive box around the foreground.
pub fn bounding_box(mask: &BinaryMask) -> Result<BBox> {
    let mut it = mask.foreground();
    let (x0, y0) = it.next().ok_or(Error::EmptyMask)?;
    let mut b = BBox {
        x_min: x0,
        y_min: y0,
        x_max: x0,
        y_max: y0,
    };
    for (x, y) in it {
        b.x_min = b.x_min.min(x);
        b.x_max = b.x_max.max(x);
        b.y_min = b.y_min.min(y);
        b.y_max = b.y_max.max(y);
    }
    Ok(b)
}

/// Component label per pixel (0 = background, 1.. in raster order of first
/// pixel) and the area of each component.
pub fn label_components(mask: &BinaryMask, conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let (h, w) = mask.dims();
    let mut labels = vec![0u32; h * w];
    let mut areas = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut area = 0;
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for &(dx, dy) in conn.offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.data()[j] != 0 && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

/// Largest foreground component. Equal-area ties go to the component whose
/// first pixel comes first in raster order. Every other component, including
/// anything below 1% of the largest area, is dropped.
pub fn largest_component(mask: &BinaryMask, conn: Connectivity) -> BinaryMask {
    let (labels, areas) = label_components(mask, conn);
    let Some((best, _)) = areas
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, usize)>, (i, &a)| match acc {
            Some((_, best_a)) if best_a >= a => acc,
            _ => Some((i, a)),
        })
    else {
        return BinaryMask::empty(mask.height(), mask.width());
    };
    let keep = best as u32 + 1;
    BinaryMask::new(
        mask.height(),
        mask.width(),
        labels.iter().map(|&l| u8::from(l == keep)).collect(),
    )
    .expect("same dimensions")
}

/// Stand-in for "no site"; far above any squared distance on real images.
const FAR: f64 = 1e20;

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest site.
fn squared_edt(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { FAR })
        .collect();
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Signed Euclidean distance between pixel centers.
///
/// Inside pixels hold `+` the distance to the nearest background pixel, where
/// the ring just outside the image frame counts as background. Outside pixels
/// hold `-` the distance to the nearest foreground pixel. No pixel is exactly
/// zero, so the smallest magnitude is 1 on both sides of an edge. An empty mask
/// yields `-hypot(h, w)` everywhere.
pub fn signed_distance(mask: &BinaryMask) -> Plane<f64> {
    let (h, w) = mask.dims();
    if mask.is_empty() {
        return Plane::filled(h, w, -((h * h + w * w) as f64).sqrt());
    }
    let outside = squared_edt(&mask.data().iter().map(|&v| v != 0).collect::<Vec<_>>(), h, w);

    let (ph, pw) = (h + 2, w + 2);
    let mut bg = vec![true; ph * pw];
    for y in 0..h {
        for x in 0..w {
            bg[(y + 1) * pw + x + 1] = !mask.get(x, y);
        }
    }
    let inside = squared_edt(&bg, ph, pw);

    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(if mask.get(x, y) {
                inside[(y + 1) * pw + x + 1].sqrt()
            } else {
                -outside[y * w + x].sqrt()
            });
        }
    }
    Plane {
        height: h,
        width: w,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(n: usize, lo: usize, hi: usize) -> BinaryMask {
        BinaryMask::from_fn(n, n, |x, y| (lo..=hi).contains(&x) && (lo..=hi).contains(&y))
    }

    #[test]
    fn centroid_examples() {
        let c = centroid(&square(256, 64, 191)).unwrap();
        assert_eq!((c.x, c.y), (127.5, 127.5));
        let one = BinaryMask::from_fn(10, 10, |x, y| (x, y) == (3, 7));
        let c = centroid(&one).unwrap();
        assert_eq!((c.x, c.y), (3.0, 7.0));
        let two = BinaryMask::from_fn(12, 12, |x, y| y == 0 && (x == 0 || x == 10));
        let c = centroid(&two).unwrap();
        assert_eq!((c.x, c.y), (5.0, 0.0));
        assert!(matches!(centroid(&BinaryMask::empty(3, 3)), Err(Error::EmptyMask)));
    }

    #[test]
    fn bbox_examples() {
        assert_eq!(
            bounding_box(&square(256, 64, 191)).unwrap(),
            BBox::new(64, 64, 191, 191).unwrap()
        );
        let one = BinaryMask::from_fn(10, 10, |x, y| (x, y) == (3, 7));
        assert_eq!(bounding_box(&one).unwrap(), BBox::new(3, 7, 3, 7).unwrap());
        // L shape: vertical bar col 1 rows 2..9, foot row 9 cols 1..5.
        let l = BinaryMask::from_fn(12, 12, |x, y| (x == 1 && (2..=9).contains(&y)) || (y == 9 && (1..=5).contains(&x)));
        assert_eq!(bounding_box(&l).unwrap(), BBox::new(1, 2, 5, 9).unwrap());
        assert!(bounding_box(&BinaryMask::empty(2, 2)).is_err());
    }

    #[test]
    fn largest_component_drops_speckle() {
        let blob = BinaryMask::from_fn(20, 20, |x, y| (2..12).contains(&x) && (2..12).contains(&y));
        assert_eq!(largest_component(&blob, Connectivity::Four), blob);

        let mut noisy = blob.clone();
        noisy.set(17, 17, true);
        assert_eq!(blob.count(), 100);
        assert_eq!(largest_component(&noisy, Connectivity::Four), blob);

        let empty = BinaryMask::empty(5, 5);
        assert_eq!(largest_component(&empty, Connectivity::Four), empty);
    }

    #[test]
    fn diagonal_pixels_split_under_four_connectivity() {
        let m = BinaryMask::from_fn(3, 3, |x, y| x == y);
        assert_eq!(largest_component(&m, Connectivity::Four).count(), 1);
        assert_eq!(largest_component(&m, Connectivity::Eight).count(), 3);
    }

    fn brute_signed_distance(mask: &BinaryMask) -> Vec<f64> {
        let (h, w) = mask.dims();
        let mut out = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let inside = mask.get(x as usize, y as usize);
                let mut best = f64::INFINITY;
                for qy in -1..=h as i64 {
                    for qx in -1..=w as i64 {
                        let in_img = qx >= 0 && qy >= 0 && qx < w as i64 && qy < h as i64;
                        let q_fg = in_img && mask.get(qx as usize, qy as usize);
                        if inside == q_fg || (!inside && !in_img) {
                            continue;
                        }
                        let d = (((qx - x).pow(2) + (qy - y).pow(2)) as f64).sqrt();
                        best = best.min(d);
                    }
                }
                out.push(if inside { best } else { -best });
            }
        }
        out
    }

    #[test]
    fn single_pixel_corner_distance() {
        let m = BinaryMask::from_fn(5, 5, |x, y| (x, y) == (2, 2));
        let sd = signed_distance(&m);
        assert!((sd.get(0, 0) + 8f64.sqrt()).abs() < 1e-12);
        assert_eq!(sd.get(2, 2), 1.0);
        assert_eq!(sd.data, brute_signed_distance(&m));
    }

    #[test]
    fn all_foreground_is_nonnegative_with_minimal_frame() {
        let m = BinaryMask::from_fn(7, 9, |_, _| true);
        let sd = signed_distance(&m);
        assert!(sd.data.iter().all(|&v| v >= 1.0));
        assert_eq!(sd.get(0, 3), 1.0);
        assert_eq!(sd.get(4, 3), 4.0);
    }

    #[test]
    fn disk_interior_matches_radius() {
        let (n, r, c) = (64usize, 20.0f64, 31.5f64);
        let m = BinaryMask::from_fn(n, n, |x, y| ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() <= r);
        let sd = signed_distance(&m);
        for &(x, y) in &[(31usize, 31usize), (25, 33), (40, 30), (20, 28)] {
            let expected = r - ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            assert!((sd.get(x, y) - expected).abs() <= 1.0 + 1e-9, "{x},{y}");
        }
    }

    proptest! {
        #[test]
        fn edt_matches_brute_force(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
            let m = BinaryMask::from_fn(h, w, |x, y| (seed >> ((x * 7 + y * 3) % 64)) & 1 == 1);
            let sd = signed_distance(&m);
            if m.is_empty() {
                prop_assert!(sd.data.iter().all(|&v| v < 0.0));
            } else {
                let brute = brute_signed_distance(&m);
                for (a, b) in sd.data.iter().zip(&brute) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn bbox_tight_and_centroid_inside(bits in proptest::collection::vec(any::<bool>(), 100)) {
            let m = BinaryMask::new(10, 10, bits.iter().map(|&b| u8::from(b)).collect()).unwrap();
            prop_assume!(!m.is_empty());
            let b = bounding_box(&m).unwrap();
            prop_assert!(m.foreground().all(|(x, y)| b.contains(x, y)));
            prop_assert!(m.foreground().any(|(x, _)| x == b.x_min));
            prop_assert!(m.foreground().any(|(x, _)| x == b.x_max));
            prop_assert!(m.foreground().any(|(_, y)| y == b.y_min));
            prop_assert!(m.foreground().any(|(_, y)| y == b.y_max));
            let c = centroid(&m).unwrap();
            prop_assert!(c.x >= b.x_min as f64 && c.x <= b.x_max as f64);
            prop_assert!(c.y >= b.y_min as f64 && c.y <= b.y_max as f64);
        }

        #[test]
        fn largest_component_is_connected_subset(bits in proptest::collection::vec(any::<bool>(), 64)) {
            let m = BinaryMask::new(8, 8, bits.iter().map(|&b| u8::from(b)).collect()).unwrap();
            let lc = largest_component(&m, Connectivity::Four);
            prop_assert!(lc.foreground().all(|(x, y)| m.get(x, y)));
            let (_, areas) = label_components(&lc, Connectivity::Four);
            prop_assert!(areas.len() <= 1);
            let (_, all) = label_components(&m, Connectivity::Four);
            prop_assert_eq!(lc.count(), all.iter().copied().max().unwrap_or(0));
        }
    }
}
