//! Binary morphology with a 3x3 square structuring element, plus run-length
//! encoding of masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scene_model::BinaryMask;

fn step(mask: &BinaryMask, grow: bool) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    Grid::from_fn(w, h, |r, c| {
        let r0 = r.saturating_sub(1);
        let r1 = (r + 1).min(h - 1);
        let c0 = c.saturating_sub(1);
        let c1 = (c + 1).min(w - 1);
        let mut any = false;
        let mut all = true;
        for rr in r0..=r1 {
            for cc in c0..=c1 {
                let v = *mask.get(rr, cc);
                any |= v;
                all &= v;
            }
        }
        // Pixels beyond the border count as background for erosion.
        let full = (r1 - r0 + 1) * (c1 - c0 + 1) == 9;
        if grow {
            any
        } else {
            all && full
        }
    })
}

/// `radius` iterations of 3x3 dilation.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    (0..radius).fold(mask.clone(), |m, _| step(&m, true))
}

/// `radius` iterations of 3x3 erosion; the image border is background.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    (0..radius).fold(mask.clone(), |m, _| step(&m, false))
}

pub fn area(mask: &BinaryMask) -> usize {
    mask.data().iter().filter(|v| **v).count()
}

/// Symmetric-difference pixel count.
pub fn xor_count(a: &BinaryMask, b: &BinaryMask) -> usize {
    a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count()
}

/// Chebyshev distance of each pixel to the nearest pixel of the opposite
/// value (0 on images that hold a single value).
pub fn boundary_distance(mask: &BinaryMask) -> Grid<u32> {
    let (w, h) = (mask.width(), mask.height());
    let mut dist = Grid::filled(w, h, u32::MAX);
    let mut queue = std::collections::VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            let v = *mask.get(r, c);
            let edge = neighbors(r, c, w, h).any(|(rr, cc)| *mask.get(rr, cc) != v);
            if edge {
                dist.set(r, c, 1);
                queue.push_back((r, c));
            }
        }
    }
    if queue.is_empty() {
        return Grid::filled(w, h, 0);
    }
    while let Some((r, c)) = queue.pop_front() {
        let d = *dist.get(r, c);
        let v = *mask.get(r, c);
        for (rr, cc) in neighbors(r, c, w, h) {
            if *mask.get(rr, cc) == v && *dist.get(rr, cc) == u32::MAX {
                dist.set(rr, cc, d + 1);
                queue.push_back((rr, cc));
            }
        }
    }
    dist
}

fn neighbors(r: usize, c: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    (-1i64..=1)
        .flat_map(move |dr| (-1i64..=1).map(move |dc| (dr, dc)))
        .filter(|&(dr, dc)| dr != 0 || dc != 0)
        .filter_map(move |(dr, dc)| {
            let rr = r as i64 + dr;
            let cc = c as i64 + dc;
            (rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64).then_some((rr as usize, cc as usize))
        })
}

/// Row-major run lengths, alternating background/foreground and starting
/// with a (possibly empty) background run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn encode(mask: &BinaryMask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &v in mask.data() {
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        counts.push(run);
        RleMask {
            width: mask.width(),
            height: mask.height(),
            counts,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let total: u64 = self.counts.iter().map(|c| *c as u64).sum();
        if total != (self.width * self.height) as u64 {
            return Err(Error::format(
                "RLE mask",
                format!("runs cover {total} pixels, image has {}", self.width * self.height),
            ));
        }
        let mut data = Vec::with_capacity(self.width * self.height);
        for (k, &c) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n(k % 2 == 1, c as usize));
        }
        Ok(Grid::from_vec(self.width, self.height, data).expect("length checked"))
    }
}
