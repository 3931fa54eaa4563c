//! Synthetic rectangle scenes: sampling, rasterization, the exact
//! connected-component inverse, and JSONL datasets.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of every grid.
pub const GRID: usize = 16;
/// Number of cells in a grid image.
pub const CELLS: usize = GRID * GRID;
/// Object classes are `1..=NUM_CLASSES`; 0 is background.
pub const NUM_CLASSES: u8 = 6;
/// Hard cap on rejection-sampling attempts per scene.
pub const MAX_ATTEMPTS: usize = 10_000;

/// Class-labeled half-open box on the integer grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoxSpec {
    pub cls: u8,
    pub x0: u8,
    pub y0: u8,
    pub x1: u8,
    pub y1: u8,
}

impl BoxSpec {
    pub fn new(cls: u8, x0: u8, y0: u8, x1: u8, y1: u8) -> Self {
        Self { cls, x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0) as usize
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0) as usize
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    /// Field ranges shared by every box that enters the tokenizer or matcher.
    pub fn is_valid(&self) -> bool {
        (1..=NUM_CLASSES).contains(&self.cls)
            && self.x0 < self.x1
            && self.y0 < self.y1
            && self.x1 as usize <= GRID
            && self.y1 as usize <= GRID
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0 as usize..self.x1 as usize).contains(&x)
            && (self.y0 as usize..self.y1 as usize).contains(&y)
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0 as usize..self.y1 as usize)
            .flat_map(move |y| (self.x0 as usize..self.x1 as usize).map(move |x| (x, y)))
    }

    /// True when the two boxes share a cell or an edge.
    fn touches(&self, other: &BoxSpec) -> bool {
        let span_x = self.x0 < other.x1 && other.x0 < self.x1;
        let span_y = self.y0 < other.y1 && other.y0 < self.y1;
        let abut_x = self.x1 == other.x0 || other.x1 == self.x0;
        let abut_y = self.y1 == other.y0 || other.y1 == self.y0;
        (span_x && span_y) || (abut_x && span_y) || (abut_y && span_x)
    }

    fn overlaps(&self, other: &BoxSpec) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Simple,
    Regular,
    Complex,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Simple, Difficulty::Regular, Difficulty::Complex];

    /// Simple = 0, Regular = (0, 0.25), Complex = [0.25, 1].
    pub fn contains(self, score: f64) -> bool {
        match self {
            Difficulty::Simple => score == 0.0,
            Difficulty::Regular => score > 0.0 && score < 0.25,
            Difficulty::Complex => score >= 0.25,
        }
    }

    /// Tier whose band holds `score`.
    pub fn classify(score: f64) -> Difficulty {
        if score == 0.0 {
            Difficulty::Simple
        } else if score < 0.25 {
            Difficulty::Regular
        } else {
            Difficulty::Complex
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Simple => "simple",
            Difficulty::Regular => "regular",
            Difficulty::Complex => "complex",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Difficulty::Simple),
            "regular" => Ok(Difficulty::Regular),
            "complex" => Ok(Difficulty::Complex),
            other => Err(Error::Config(format!("unknown difficulty tier `{other}`"))),
        }
    }
}

/// Ordered list of boxes; later boxes occlude earlier ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub grid: usize,
    pub difficulty: Difficulty,
    pub boxes: Vec<BoxSpec>,
}

impl Scene {
    pub fn layout(&self) -> Layout {
        Layout::new(self.boxes.clone())
    }
}

/// Row-major 16x16 grid of class ids (0 = background).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct GridImage {
    pub cells: [u8; CELLS],
}

impl GridImage {
    pub fn blank() -> Self {
        Self { cells: [0; CELLS] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.cells[y * GRID + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.cells[y * GRID + x] = value;
    }

    pub fn painted(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }

    pub fn is_valid(&self) -> bool {
        self.cells.iter().all(|&c| c <= NUM_CLASSES)
    }
}

impl Default for GridImage {
    fn default() -> Self {
        Self::blank()
    }
}

impl fmt::Debug for GridImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "GridImage [")?;
        for row in self.cells.chunks(GRID) {
            let line: String = row
                .iter()
                .map(|&c| if c == 0 { '.' } else { (b'0' + c) as char })
                .collect();
            writeln!(f, "  {line}")?;
        }
        write!(f, "]")
    }
}

/// Unordered multiset of boxes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    pub instances: Vec<BoxSpec>,
}

impl Layout {
    pub fn new(instances: Vec<BoxSpec>) -> Self {
        Self { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Instances sorted by `(y0, x0, cls)`, then by the remaining fields.
    pub fn canonical(&self) -> Layout {
        let mut instances = self.instances.clone();
        instances.sort_by_key(|b| (b.y0, b.x0, b.cls, b.x1, b.y1));
        Layout { instances }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WorldConfig {
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            min_boxes: 1,
            max_boxes: 5,
            min_size: 2,
            max_size: 6,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_size < 2 || self.min_size > self.max_size || self.max_size > GRID {
            return Err(Error::Config(format!(
                "box sizes must satisfy 2 <= min_size <= max_size <= {GRID}, got {}..={}",
                self.min_size, self.max_size
            )));
        }
        if self.min_boxes < 1 || self.min_boxes > self.max_boxes || self.max_boxes > 5 {
            return Err(Error::Config(format!(
                "box counts must satisfy 1 <= min_boxes <= max_boxes <= 5, got {}..={}",
                self.min_boxes, self.max_boxes
            )));
        }
        Ok(())
    }
}

fn random_box<R: Rng + ?Sized>(rng: &mut R, cfg: &WorldConfig) -> BoxSpec {
    let w = rng.random_range(cfg.min_size..=cfg.max_size);
    let h = rng.random_range(cfg.min_size..=cfg.max_size);
    let x0 = rng.random_range(0..=GRID - w);
    let y0 = rng.random_range(0..=GRID - h);
    let cls = rng.random_range(1..=NUM_CLASSES);
    BoxSpec::new(cls, x0 as u8, y0 as u8, (x0 + w) as u8, (y0 + h) as u8)
}

/// Draws a scene whose overlap score lies in `difficulty`'s band.
///
/// Simple scenes are built box by box so that no two boxes overlap and no
/// two same-class boxes share an edge, which keeps them exactly invertible
/// by [`oracle_parse`]. The other tiers reject whole scenes until the score
/// lands in band.
pub fn sample_scene<R: Rng + ?Sized>(
    rng: &mut R,
    id: u64,
    difficulty: Difficulty,
    cfg: &WorldConfig,
) -> Result<Scene> {
    cfg.validate()?;
    let mut attempts = 0;
    while attempts < MAX_ATTEMPTS {
        let n = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
        let mut boxes = Vec::with_capacity(n);
        match difficulty {
            Difficulty::Simple => {
                while boxes.len() < n && attempts < MAX_ATTEMPTS {
                    attempts += 1;
                    let b = random_box(rng, cfg);
                    let clash = boxes.iter().any(|o: &BoxSpec| {
                        b.overlaps(o) || (b.cls == o.cls && b.touches(o))
                    });
                    if !clash {
                        boxes.push(b);
                    }
                }
                if boxes.len() < n {
                    break;
                }
            }
            Difficulty::Regular | Difficulty::Complex => {
                attempts += 1;
                boxes.extend((0..n).map(|_| random_box(rng, cfg)));
            }
        }
        let scene = Scene {
            id,
            grid: GRID,
            difficulty,
            boxes,
        };
        if difficulty.contains(overlap_score(&scene)) {
            return Ok(scene);
        }
    }
    Err(Error::Generation(format!(
        "no {difficulty} scene within {MAX_ATTEMPTS} attempts (boxes {}..={}, sizes {}..={})",
        cfg.min_boxes, cfg.max_boxes, cfg.min_size, cfg.max_size
    )))
}

/// Samples `count` scenes with consecutive ids starting at `first_id`.
pub fn sample_dataset<R: Rng + ?Sized>(
    rng: &mut R,
    first_id: u64,
    count: usize,
    difficulty: Difficulty,
    cfg: &WorldConfig,
) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| sample_scene(rng, first_id + i, difficulty, cfg))
        .collect()
}

/// Paints boxes in list order.
pub fn rasterize(scene: &Scene) -> GridImage {
    rasterize_boxes(&scene.boxes)
}

pub fn rasterize_boxes(boxes: &[BoxSpec]) -> GridImage {
    let mut img = GridImage::blank();
    for b in boxes {
        let (x1, y1) = ((b.x1 as usize).min(GRID), (b.y1 as usize).min(GRID));
        for y in b.y0 as usize..y1 {
            for x in b.x0 as usize..x1 {
                img.set(x, y, b.cls);
            }
        }
    }
    img
}

/// Fraction of covered cells that are covered more than once.
pub fn overlap_score(scene: &Scene) -> f64 {
    let mut cover = [0u8; CELLS];
    for b in &scene.boxes {
        for (x, y) in b.cells() {
            cover[y * GRID + x] = cover[y * GRID + x].saturating_add(1);
        }
    }
    let covered = cover.iter().filter(|&&c| c >= 1).count();
    if covered == 0 {
        return 0.0;
    }
    let doubled = cover.iter().filter(|&&c| c >= 2).count();
    doubled as f64 / covered as f64
}

/// Cells covered by at least two boxes.
pub fn overlap_mask(boxes: &[BoxSpec]) -> [bool; CELLS] {
    let mut cover = [0u8; CELLS];
    for b in boxes {
        for (x, y) in b.cells() {
            cover[y * GRID + x] = cover[y * GRID + x].saturating_add(1);
        }
    }
    cover.map(|c| c >= 2)
}

/// Maximal 4-connected monochromatic non-background region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub cls: u8,
    pub cells: usize,
    pub bounds: BoxSpec,
}

impl Region {
    pub fn solidity(&self) -> f64 {
        self.cells as f64 / self.bounds.area() as f64
    }
}

/// Connected components in raster order of their first cell.
pub fn regions(img: &GridImage) -> Vec<Region> {
    let mut seen = [false; CELLS];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..CELLS {
        let cls = img.cells[start];
        if cls == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (GRID, GRID, 0, 0);
        let mut count = 0;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % GRID, i / GRID);
            count += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |j: usize| {
                if !seen[j] && img.cells[j] == cls {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < GRID {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - GRID);
            }
            if y + 1 < GRID {
                visit(i + GRID);
            }
        }
        out.push(Region {
            cls,
            cells: count,
            bounds: BoxSpec::new(cls, x0 as u8, y0 as u8, x1 as u8, y1 as u8),
        });
    }
    out
}

/// One box per connected region, equal to the region's bounding rectangle.
pub fn oracle_parse(img: &GridImage) -> Layout {
    Layout::new(regions(img).into_iter().map(|r| r.bounds).collect())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    cls: i64,
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    id: u64,
    grid: i64,
    difficulty: Difficulty,
    boxes: Vec<RawBox>,
}

fn check_scene(raw: RawScene, line: usize) -> Result<Scene> {
    let schema = |message: String| Error::Schema { line, message };
    if raw.grid != GRID as i64 {
        return Err(schema(format!("grid must be {GRID}, got {}", raw.grid)));
    }
    if raw.boxes.is_empty() || raw.boxes.len() > 5 {
        return Err(schema(format!("scene needs 1..=5 boxes, got {}", raw.boxes.len())));
    }
    let mut boxes = Vec::with_capacity(raw.boxes.len());
    for (k, b) in raw.boxes.iter().enumerate() {
        if !(1..=NUM_CLASSES as i64).contains(&b.cls) {
            return Err(schema(format!("box {k}: cls {} outside 1..={NUM_CLASSES}", b.cls)));
        }
        let g = GRID as i64;
        if !(0 <= b.x0 && b.x0 < b.x1 && b.x1 <= g && 0 <= b.y0 && b.y0 < b.y1 && b.y1 <= g) {
            return Err(schema(format!(
                "box {k}: coordinates ({},{},{},{}) out of range",
                b.x0, b.y0, b.x1, b.y1
            )));
        }
        boxes.push(BoxSpec::new(
            b.cls as u8,
            b.x0 as u8,
            b.y0 as u8,
            b.x1 as u8,
            b.y1 as u8,
        ));
    }
    Ok(Scene {
        id: raw.id,
        grid: GRID,
        difficulty: raw.difficulty,
        boxes,
    })
}

/// Parses JSONL text; blank lines are skipped.
pub fn parse_dataset(text: impl BufRead) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawScene = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        scenes.push(check_scene(raw, line_no)?);
    }
    Ok(scenes)
}

pub fn dataset_read(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file))
}

pub fn dataset_write(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for scene in scenes {
        serde_json::to_writer(&mut w, scene)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(boxes: Vec<BoxSpec>) -> Scene {
        Scene {
            id: 0,
            grid: GRID,
            difficulty: Difficulty::Simple,
            boxes,
        }
    }

    #[test]
    fn simple_tier_has_zero_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_scene(&mut rng, 0, Difficulty::Simple, &WorldConfig::default()).unwrap();
        assert_eq!(overlap_score(&s), 0.0);
        assert!((1..=5).contains(&s.boxes.len()));
    }

    #[test]
    fn complex_tier_meets_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_scene(&mut rng, 0, Difficulty::Complex, &WorldConfig::default()).unwrap();
        assert!(overlap_score(&s) >= 0.25);
    }

    #[test]
    fn single_box_cannot_overlap() {
        let cfg = WorldConfig {
            max_boxes: 1,
            ..WorldConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for tier in [Difficulty::Regular, Difficulty::Complex] {
            assert!(matches!(
                sample_scene(&mut rng, 0, tier, &cfg),
                Err(Error::Generation(_))
            ));
        }
        assert!(sample_scene(&mut rng, 0, Difficulty::Simple, &cfg).is_ok());
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = WorldConfig::default();
        let a = sample_dataset(&mut ChaCha8Rng::seed_from_u64(9), 0, 20, Difficulty::Regular, &cfg);
        let b = sample_dataset(&mut ChaCha8Rng::seed_from_u64(9), 0, 20, Difficulty::Regular, &cfg);
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn rasterize_examples() {
        assert_eq!(rasterize(&scene(vec![])), GridImage::blank());

        let img = rasterize(&scene(vec![BoxSpec::new(3, 0, 0, 2, 2)]));
        for y in 0..GRID {
            for x in 0..GRID {
                let want = if x < 2 && y < 2 { 3 } else { 0 };
                assert_eq!(img.get(x, y), want, "cell ({x},{y})");
            }
        }

        let img = rasterize(&scene(vec![
            BoxSpec::new(1, 0, 0, 4, 4),
            BoxSpec::new(2, 2, 2, 6, 6),
        ]));
        assert_eq!(img.get(3, 3), 2);
        assert_eq!(img.get(1, 1), 1);
        assert_eq!(img.painted(), 28);
    }

    #[test]
    fn overlap_score_examples() {
        let a = BoxSpec::new(1, 0, 0, 4, 4);
        assert_eq!(overlap_score(&scene(vec![a, BoxSpec::new(2, 8, 8, 10, 10)])), 0.0);
        assert_eq!(overlap_score(&scene(vec![a, a])), 1.0);
        let s = overlap_score(&scene(vec![a, BoxSpec::new(2, 2, 2, 6, 6)]));
        assert_eq!(s, 4.0 / 28.0);
        assert_eq!(overlap_score(&scene(vec![])), 0.0);
    }

    #[test]
    fn oracle_parse_examples() {
        assert!(oracle_parse(&GridImage::blank()).is_empty());

        // L-shape: 4x4 block minus its top-right 2x2 corner.
        let mut img = GridImage::blank();
        for y in 3..7 {
            for x in 5..9 {
                if !(x >= 7 && y < 5) {
                    img.set(x, y, 2);
                }
            }
        }
        let parsed = oracle_parse(&img);
        assert_eq!(parsed.instances, vec![BoxSpec::new(2, 5, 3, 9, 7)]);
        assert_eq!(regions(&img)[0].cells, 12);
    }

    #[test]
    fn oracle_inverts_disjoint_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for id in 0..200 {
            let s = sample_scene(&mut rng, id, Difficulty::Simple, &WorldConfig::default()).unwrap();
            let parsed = oracle_parse(&rasterize(&s));
            assert_eq!(parsed.canonical(), s.layout().canonical(), "scene {id}");
        }
    }

    #[test]
    fn touching_rules() {
        let a = BoxSpec::new(1, 0, 0, 2, 2);
        assert!(a.touches(&BoxSpec::new(1, 2, 0, 4, 2)));
        assert!(!a.touches(&BoxSpec::new(1, 2, 2, 4, 4)));
        assert!(!a.touches(&BoxSpec::new(1, 3, 0, 5, 2)));
        assert!(a.touches(&BoxSpec::new(1, 1, 1, 3, 3)));
    }

    #[test]
    fn dataset_schema_errors() {
        let bad = r#"{"id":0,"grid":16,"difficulty":"simple","boxes":[{"cls":7,"x0":0,"y0":0,"x1":2,"y1":2}]}"#;
        match parse_dataset(bad.as_bytes()) {
            Err(Error::Schema { line: 1, .. }) => {}
            other => panic!("expected schema error, got {other:?}"),
        }
        let neg = r#"{"id":0,"grid":16,"difficulty":"simple","boxes":[{"cls":1,"x0":-1,"y0":0,"x1":2,"y1":2}]}"#;
        assert!(matches!(parse_dataset(neg.as_bytes()), Err(Error::Schema { .. })));
        let text = "\n{not json}\n";
        match parse_dataset(text.as_bytes()) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("expected parse error on line 2, got {other:?}"),
        }
        assert!(parse_dataset("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn jsonl_line_shape() {
        let s = Scene {
            id: 4,
            grid: GRID,
            difficulty: Difficulty::Regular,
            boxes: vec![BoxSpec::new(2, 1, 1, 3, 4)],
        };
        let line = serde_json::to_string(&s).unwrap();
        assert_eq!(
            line,
            r#"{"id":4,"grid":16,"difficulty":"regular","boxes":[{"cls":2,"x0":1,"y0":1,"x1":3,"y1":4}]}"#
        );
    }
}
