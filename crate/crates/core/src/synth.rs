//! Procedural 32×32 scenes: fine-grained contrastive pairs, a labeled
//! shape set, and the unlabeled training corpus.
//!
//! All geometry uses integer arithmetic on pixel indices, so a scene is a
//! pure function of its seed on every platform.

use std::fmt;
use std::str::FromStr;

use crate::encoder::ImageTensor;
use crate::error::{DivaError, Result};
use crate::rng::RngStream;

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 8;

const TAG_PAIR: u64 = 100;
const TAG_LABELED: u64 = 200;
const TAG_TRAIN: u64 = 300;

const BACKGROUNDS: [[u8; 3]; 4] = [[24, 24, 32], [200, 200, 190], [40, 70, 60], [90, 60, 90]];
const COLORS: [[u8; 3]; 8] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 90, 240],
    [240, 220, 40],
    [240, 130, 20],
    [170, 60, 220],
    [30, 210, 220],
    [250, 250, 250],
];

/// Byte canvas before conversion to an [`ImageTensor`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Canvas {
    pub size: usize,
    pub bytes: Vec<u8>,
    pub background: [u8; 3],
}

impl Canvas {
    pub fn new(size: usize, background: [u8; 3]) -> Self {
        Self {
            size,
            bytes: background.repeat(size * size),
            background,
        }
    }

    fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        let s = self.size as i64;
        if (0..s).contains(&x) && (0..s).contains(&y) {
            let i = (y as usize * self.size + x as usize) * 3;
            self.bytes[i..i + 3].copy_from_slice(&color);
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.size + x) * 3;
        [self.bytes[i], self.bytes[i + 1], self.bytes[i + 2]]
    }

    /// Paints every pixel whose offset from `(cx, cy)` satisfies `inside`.
    fn paint(
        &mut self,
        cx: i64,
        cy: i64,
        r: i64,
        color: [u8; 3],
        inside: impl Fn(i64, i64) -> bool,
    ) {
        for dy in -r..=r {
            for dx in -r..=r {
                if inside(dx, dy) {
                    self.set(cx + dx, cy + dy, color);
                }
            }
        }
    }

    pub fn to_image(&self) -> ImageTensor {
        ImageTensor::from_bytes(self.size, self.size, &self.bytes).expect("canvas dimensions")
    }

    /// Mask of pixels that differ from the background colour.
    pub fn foreground(&self) -> Vec<bool> {
        (0..self.size * self.size)
            .map(|i| self.bytes[i * 3..i * 3 + 3] != self.background)
            .collect()
    }
}

/// Shape classes of the labeled set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Plus,
    Ring,
    Diamond,
    HBar,
    VBar,
}

impl Shape {
    pub const ALL: [Shape; NUM_CLASSES] = [
        Shape::Disc,
        Shape::Square,
        Shape::Triangle,
        Shape::Plus,
        Shape::Ring,
        Shape::Diamond,
        Shape::HBar,
        Shape::VBar,
    ];

    fn contains(self, dx: i64, dy: i64, r: i64) -> bool {
        let t = (r / 3).max(1);
        match self {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // Apex at the top, base on the bottom row.
            Shape::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
            Shape::Plus => (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r),
            Shape::Ring => {
                let d = dx * dx + dy * dy;
                d <= r * r && d > (r - t - 1) * (r - t - 1)
            }
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::HBar => dx.abs() <= r && dy.abs() <= t,
            Shape::VBar => dy.abs() <= r && dx.abs() <= t,
        }
    }

    fn draw(self, c: &mut Canvas, cx: i64, cy: i64, r: i64, color: [u8; 3]) {
        c.paint(cx, cy, r, color, |dx, dy| self.contains(dx, dy, r));
    }
}

/// Pattern families of the contrastive pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VisualPattern {
    Orientation,
    Quantity,
    Color,
    Position,
    Structure,
}

impl VisualPattern {
    pub const ALL: [VisualPattern; 5] = [
        VisualPattern::Orientation,
        VisualPattern::Quantity,
        VisualPattern::Color,
        VisualPattern::Position,
        VisualPattern::Structure,
    ];

    fn tag(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for VisualPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VisualPattern::Orientation => "orientation",
            VisualPattern::Quantity => "quantity",
            VisualPattern::Color => "color",
            VisualPattern::Position => "position",
            VisualPattern::Structure => "structure",
        })
    }
}

impl FromStr for VisualPattern {
    type Err = DivaError;
    fn from_str(s: &str) -> Result<Self> {
        VisualPattern::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| DivaError::InvalidArgument(format!("unknown pattern `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastivePair {
    pub a: Canvas,
    pub b: Canvas,
    pub pattern: VisualPattern,
    pub seed: u64,
}

impl ContrastivePair {
    pub fn images(&self) -> (ImageTensor, ImageTensor) {
        (self.a.to_image(), self.b.to_image())
    }
}

/// Arrow pointing up in local coordinates: triangular head over a stem.
fn arrow_contains(dx: i64, dy: i64, r: i64) -> bool {
    let head = dy <= 0 && dy >= -r && 2 * dx.abs() <= dy + r;
    let stem = dy > 0 && dy <= r && dx.abs() <= (r / 4).max(1);
    head || stem
}

/// Rotates a local offset by `quarter` quarter-turns clockwise (inverse map).
fn unrotate(dx: i64, dy: i64, quarter: u8) -> (i64, i64) {
    match quarter % 4 {
        0 => (dx, dy),
        1 => (dy, -dx),
        2 => (-dx, -dy),
        _ => (-dy, dx),
    }
}

fn pick<T: Copy>(rng: &mut RngStream, items: &[T]) -> T {
    items[rng.int_inclusive(0, items.len() - 1)]
}

/// Deterministic contrastive pair differing only in `pattern`'s attribute.
pub fn gen_pair(pattern: VisualPattern, seed: u64) -> ContrastivePair {
    let mut rng = RngStream::new(seed, TAG_PAIR + pattern.tag());
    let bg = pick(&mut rng, &BACKGROUNDS);
    let color = pick(&mut rng, &COLORS);
    let mut a = Canvas::new(IMAGE_SIZE, bg);
    let mut b = Canvas::new(IMAGE_SIZE, bg);
    match pattern {
        VisualPattern::Orientation => {
            let r = rng.int_inclusive(6, 9) as i64;
            let cx = rng.int_inclusive(11, 20) as i64;
            let cy = rng.int_inclusive(11, 20) as i64;
            let qa = rng.int_inclusive(0, 3) as u8;
            let qb = (qa + rng.int_inclusive(1, 3) as u8) % 4;
            for (canvas, q) in [(&mut a, qa), (&mut b, qb)] {
                canvas.paint(cx, cy, r, color, |dx, dy| {
                    let (lx, ly) = unrotate(dx, dy, q);
                    arrow_contains(lx, ly, r)
                });
            }
        }
        VisualPattern::Quantity => {
            // 3×3 grid of 4×4 blocks on an 8-pixel pitch; blocks never touch.
            let n = rng.int_inclusive(1, 4);
            let mut slots: Vec<usize> = (0..9).collect();
            rng.shuffle(&mut slots);
            let draw = |c: &mut Canvas, slot: usize| {
                let (gx, gy) = ((slot % 3) as i64, (slot / 3) as i64);
                let (x0, y0) = (6 + gx * 8, 6 + gy * 8);
                for y in y0..y0 + 4 {
                    for x in x0..x0 + 4 {
                        c.set(x, y, color);
                    }
                }
            };
            for &s in &slots[..n] {
                draw(&mut a, s);
                draw(&mut b, s);
            }
            draw(&mut b, slots[n]);
        }
        VisualPattern::Color => {
            let shape = pick(&mut rng, &Shape::ALL);
            let r = rng.int_inclusive(5, 9) as i64;
            let cx = rng.int_inclusive(10, 21) as i64;
            let cy = rng.int_inclusive(10, 21) as i64;
            let ia = rng.int_inclusive(0, COLORS.len() - 1);
            let ib = (ia + rng.int_inclusive(1, COLORS.len() - 1)) % COLORS.len();
            shape.draw(&mut a, cx, cy, r, COLORS[ia]);
            shape.draw(&mut b, cx, cy, r, COLORS[ib]);
        }
        VisualPattern::Position => {
            let shape = pick(&mut rng, &Shape::ALL);
            let r = rng.int_inclusive(4, 6) as i64;
            let cy = rng.int_inclusive(8, 23) as i64;
            // Left half vs right half.
            let xa = rng.int_inclusive(7, 11) as i64;
            let xb = rng.int_inclusive(20, 24) as i64;
            let (xa, xb) = if rng.bernoulli(0.5) {
                (xa, xb)
            } else {
                (xb, xa)
            };
            shape.draw(&mut a, xa, cy, r, color);
            shape.draw(&mut b, xb, cy, r, color);
        }
        VisualPattern::Structure => {
            // Two parts stacked vertically; the pair swaps their order.
            let other = loop {
                let c = pick(&mut rng, &COLORS);
                if c != color {
                    break c;
                }
            };
            let r = rng.int_inclusive(4, 6) as i64;
            let cx = rng.int_inclusive(10, 21) as i64;
            let (top, bottom) = (16 - r - 1, 16 + r + 1);
            Shape::Disc.draw(&mut a, cx, top, r, color);
            Shape::Square.draw(&mut a, cx, bottom, r, other);
            Shape::Square.draw(&mut b, cx, top, r, other);
            Shape::Disc.draw(&mut b, cx, bottom, r, color);
        }
    }
    ContrastivePair {
        a,
        b,
        pattern,
        seed,
    }
}

/// `count` held-out pairs per pattern, seeds `base_seed..base_seed+count`.
pub fn pair_set(count: usize, base_seed: u64) -> Vec<ContrastivePair> {
    VisualPattern::ALL
        .iter()
        .flat_map(|&p| (0..count as u64).map(move |i| gen_pair(p, base_seed + i)))
        .collect()
}

/// One labeled shape image.
pub fn gen_labeled(class: usize, seed: u64) -> Canvas {
    let mut rng = RngStream::new(seed, TAG_LABELED + class as u64);
    let bg = pick(&mut rng, &BACKGROUNDS);
    let color = pick(&mut rng, &COLORS);
    let r = rng.int_inclusive(6, 10) as i64;
    let cx = rng.int_inclusive(11, 20) as i64;
    let cy = rng.int_inclusive(11, 20) as i64;
    let mut c = Canvas::new(IMAGE_SIZE, bg);
    Shape::ALL[class % NUM_CLASSES].draw(&mut c, cx, cy, r, color);
    c
}

/// Balanced labeled images: item `i` has class `i % 8` and seed
/// `base_seed + i`.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl LabeledSet {
    pub fn generate(count: usize, base_seed: u64) -> Self {
        let mut out = LabeledSet {
            images: Vec::with_capacity(count),
            labels: Vec::with_capacity(count),
            seeds: Vec::with_capacity(count),
        };
        for i in 0..count {
            let class = i % NUM_CLASSES;
            let seed = base_seed + i as u64;
            out.images.push(gen_labeled(class, seed).to_image());
            out.labels.push(class);
            out.seeds.push(seed);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Unlabeled training scene: one to three objects of random shape,
/// colour, size and place, sometimes an arrow.
pub fn gen_train_scene(seed: u64) -> Canvas {
    let mut rng = RngStream::new(seed, TAG_TRAIN);
    let bg = pick(&mut rng, &BACKGROUNDS);
    let mut c = Canvas::new(IMAGE_SIZE, bg);
    let objects = rng.int_inclusive(1, 3);
    for _ in 0..objects {
        let color = pick(&mut rng, &COLORS);
        let r = rng.int_inclusive(3, 8) as i64;
        let cx = rng.int_inclusive(4, 27) as i64;
        let cy = rng.int_inclusive(4, 27) as i64;
        if rng.bernoulli(0.2) {
            let q = rng.int_inclusive(0, 3) as u8;
            c.paint(cx, cy, r, color, |dx, dy| {
                let (lx, ly) = unrotate(dx, dy, q);
                arrow_contains(lx, ly, r)
            });
        } else {
            pick(&mut rng, &Shape::ALL).draw(&mut c, cx, cy, r, color);
        }
    }
    c
}

pub fn train_corpus(count: usize, base_seed: u64) -> Vec<ImageTensor> {
    (0..count as u64)
        .map(|i| gen_train_scene(base_seed + i).to_image())
        .collect()
}

/// Number of 4-connected foreground components.
pub fn count_components(c: &Canvas) -> usize {
    let fg = c.foreground();
    let s = c.size;
    let mut seen = vec![false; s * s];
    let mut count = 0;
    for start in 0..s * s {
        if !fg[start] || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % s, i / s);
            let mut nb = Vec::with_capacity(4);
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < s {
                nb.push(i + 1);
            }
            if y > 0 {
                nb.push(i - s);
            }
            if y + 1 < s {
                nb.push(i + s);
            }
            for j in nb {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

/// Translates by `(dx, dy)` pixels, replicating edge pixels.
pub fn translate(image: &ImageTensor, dx: i64, dy: i64) -> ImageTensor {
    let (h, w) = (image.height() as i64, image.width() as i64);
    let src = image.tensor().data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let sx = (x - dx).clamp(0, w - 1);
            let sy = (y - dy).clamp(0, h - 1);
            let i = ((sy * w + sx) * 3) as usize;
            out.extend_from_slice(&src[i..i + 3]);
        }
    }
    ImageTensor::new(crate::tensor::Tensor::new(image.tensor().shape(), out).expect("same shape"))
        .expect("rgb")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_deterministic_and_distinct() {
        for p in VisualPattern::ALL {
            for seed in 0..20 {
                let x = gen_pair(p, seed);
                assert_eq!(x, gen_pair(p, seed));
                assert_ne!(x.a.bytes, x.b.bytes, "{p} seed {seed}");
                assert_eq!(x.a.background, x.b.background);
            }
        }
    }

    #[test]
    fn quantity_pairs_count_n_and_n_plus_one() {
        for seed in 0..50 {
            let pair = gen_pair(VisualPattern::Quantity, seed);
            let (na, nb) = (count_components(&pair.a), count_components(&pair.b));
            assert!((1..=4).contains(&na));
            assert_eq!(nb, na + 1, "seed {seed}");
        }
    }

    #[test]
    fn color_pairs_share_background_pixels() {
        for seed in 0..50 {
            let pair = gen_pair(VisualPattern::Color, seed);
            let (fa, fb) = (pair.a.foreground(), pair.b.foreground());
            assert_eq!(fa, fb);
            for (i, &fg) in fa.iter().enumerate() {
                if !fg {
                    assert_eq!(
                        pair.a.bytes[i * 3..i * 3 + 3],
                        pair.b.bytes[i * 3..i * 3 + 3]
                    );
                } else {
                    assert_ne!(
                        pair.a.bytes[i * 3..i * 3 + 3],
                        pair.b.bytes[i * 3..i * 3 + 3]
                    );
                }
            }
        }
    }

    #[test]
    fn orientation_and_position_keep_object_area() {
        for seed in 0..20 {
            for p in [VisualPattern::Orientation, VisualPattern::Position] {
                let pair = gen_pair(p, seed);
                let area = |c: &Canvas| c.foreground().iter().filter(|&&f| f).count();
                assert_eq!(area(&pair.a), area(&pair.b), "{p} seed {seed}");
            }
        }
    }

    #[test]
    fn labeled_set_is_balanced() {
        let set = LabeledSet::generate(64, 1000);
        for c in 0..NUM_CLASSES {
            assert_eq!(set.labels.iter().filter(|&&l| l == c).count(), 8);
        }
        let again = LabeledSet::generate(64, 1000);
        assert_eq!(set.images, again.images);
    }

    #[test]
    fn every_shape_paints_pixels() {
        for s in Shape::ALL {
            let mut c = Canvas::new(32, BACKGROUNDS[0]);
            s.draw(&mut c, 16, 16, 6, COLORS[0]);
            assert!(c.foreground().iter().any(|&f| f), "{s:?}");
        }
    }

    #[test]
    fn zero_translation_is_identity() {
        let img = gen_train_scene(5).to_image();
        assert_eq!(translate(&img, 0, 0), img);
        assert_ne!(translate(&img, 1, 0), img);
    }
}
