//! Synthetic shortest-path segmentation task: grids with two query points and
//! random obstacles, labelled with every cell on some shortest path.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_GRID: usize = 32;
pub const DEFAULT_OBSTACLE_P: f64 = 0.1;
pub const MAX_RETRIES: usize = 1000;
const MAGIC: &[u8; 6] = b"SPTH1\n";

pub type Cell = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridExample {
    pub height: usize,
    pub width: usize,
    /// Row-major 0/1 planes.
    pub query: Vec<u8>,
    pub obstacles: Vec<u8>,
    pub label: Vec<u8>,
}

impl GridExample {
    /// Builds an example from explicit queries and obstacles, computing the label.
    /// Returns `Ok(None)` when the queries are mutually unreachable.
    pub fn from_parts(
        height: usize,
        width: usize,
        q1: Cell,
        q2: Cell,
        mut obstacles: Vec<u8>,
    ) -> Result<Option<Self>> {
        if obstacles.len() != height * width {
            return Err(Error::Dimension(format!(
                "obstacle plane has {} cells, grid is {height}x{width}",
                obstacles.len()
            )));
        }
        for q in [q1, q2] {
            if q.0 >= height || q.1 >= width {
                return Err(Error::Usage(format!("query {q:?} outside {height}x{width} grid")));
            }
        }
        if q1 == q2 {
            return Err(Error::Usage("query points must be distinct".into()));
        }
        for q in [q1, q2] {
            obstacles[q.0 * width + q.1] = 0;
        }
        let Some(label) = shortest_path_label(&obstacles, height, width, q1, q2)? else {
            return Ok(None);
        };
        let mut query = vec![0; height * width];
        query[q1.0 * width + q1.1] = 1;
        query[q2.0 * width + q2.1] = 1;
        Ok(Some(Self {
            height,
            width,
            query,
            obstacles,
            label,
        }))
    }

    pub fn queries(&self) -> Vec<Cell> {
        self.query
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn label_count(&self) -> usize {
        self.label.iter().filter(|&&v| v == 1).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSpec {
    pub phases: usize,
    pub examples_per_phase: usize,
    pub epochs_per_phase: usize,
}

impl Default for CurriculumSpec {
    fn default() -> Self {
        Self {
            phases: 5,
            examples_per_phase: 5000,
            epochs_per_phase: 50,
        }
    }
}

impl CurriculumSpec {
    /// Side of the square window around the first query that contains the second.
    pub fn window(phase: usize) -> usize {
        5 + 4 * phase.saturating_sub(1)
    }
}

/// 4-connected unit-cost BFS from `source`; `None` marks unreachable cells.
pub fn bfs_distance_field(
    obstacles: &[u8],
    height: usize,
    width: usize,
    source: Cell,
) -> Result<Vec<Option<u32>>> {
    if obstacles.len() != height * width {
        return Err(Error::Dimension(format!(
            "obstacle plane has {} cells, grid is {height}x{width}",
            obstacles.len()
        )));
    }
    if source.0 >= height || source.1 >= width {
        return Err(Error::Usage(format!("source {source:?} outside grid")));
    }
    if obstacles[source.0 * width + source.1] != 0 {
        return Err(Error::Usage(format!("source {source:?} is an obstacle")));
    }
    let mut dist = vec![None; height * width];
    dist[source.0 * width + source.1] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some((r, c)) = queue.pop_front() {
        let d = dist[r * width + c].expect("queued cells have distances");
        let neighbors = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for (nr, nc) in neighbors {
            if nr >= height || nc >= width {
                continue;
            }
            let i = nr * width + nc;
            if obstacles[i] == 0 && dist[i].is_none() {
                dist[i] = Some(d + 1);
                queue.push_back((nr, nc));
            }
        }
    }
    Ok(dist)
}

/// Cells (excluding the queries) on at least one shortest `q1 → q2` path, or
/// `None` if `q2` is unreachable.
pub fn shortest_path_label(
    obstacles: &[u8],
    height: usize,
    width: usize,
    q1: Cell,
    q2: Cell,
) -> Result<Option<Vec<u8>>> {
    let d1 = bfs_distance_field(obstacles, height, width, q1)?;
    let d2 = bfs_distance_field(obstacles, height, width, q2)?;
    let Some(total) = d1[q2.0 * width + q2.1] else {
        return Ok(None);
    };
    let label = d1
        .iter()
        .zip(&d2)
        .enumerate()
        .map(|(i, (a, b))| {
            let on_path = matches!((a, b), (Some(a), Some(b)) if a + b == total);
            let is_query = i == q1.0 * width + q1.1 || i == q2.0 * width + q2.1;
            (on_path && !is_query) as u8
        })
        .collect();
    Ok(Some(label))
}

pub fn validate_phase(phase: usize) -> Result<()> {
    if !(1..=5).contains(&phase) {
        return Err(Error::Usage(format!("phase must be in 1..=5, got {phase}")));
    }
    Ok(())
}

/// Draws one example. Unreachable query pairs are redrawn with fresh
/// randomness, up to [`MAX_RETRIES`] attempts.
pub fn generate_example<R: Rng + ?Sized>(
    phase: usize,
    grid: usize,
    obstacle_p: f64,
    rng: &mut R,
) -> Result<GridExample> {
    validate_phase(phase)?;
    if grid < 2 || grid > u16::MAX as usize {
        return Err(Error::Usage(format!("grid size {grid} out of range")));
    }
    if !(0.0..=1.0).contains(&obstacle_p) {
        return Err(Error::Usage(format!("obstacle probability {obstacle_p} not in [0, 1]")));
    }
    let half = (CurriculumSpec::window(phase) / 2) as isize;
    for _ in 0..MAX_RETRIES {
        let q1 = (rng.random_range(0..grid), rng.random_range(0..grid));
        let lo = |v: usize| (v as isize - half).max(0) as usize;
        let hi = |v: usize| ((v as isize + half) as usize).min(grid - 1);
        let candidates: Vec<Cell> = (lo(q1.0)..=hi(q1.0))
            .flat_map(|r| (lo(q1.1)..=hi(q1.1)).map(move |c| (r, c)))
            .filter(|&c| c != q1)
            .collect();
        let q2 = candidates[rng.random_range(0..candidates.len())];
        let obstacles: Vec<u8> = (0..grid * grid)
            .map(|i| {
                let cell = (i / grid, i % grid);
                let draw = rng.random::<f64>() < obstacle_p;
                (draw && cell != q1 && cell != q2) as u8
            })
            .collect();
        if let Some(ex) = GridExample::from_parts(grid, grid, q1, q2, obstacles)? {
            return Ok(ex);
        }
    }
    Err(Error::Generation(format!(
        "no reachable query pair after {MAX_RETRIES} attempts (phase {phase}, p = {obstacle_p})"
    )))
}

/// Base seed for the dataset of `phase` in a run seeded with `seed`.
pub fn phase_seed(seed: u64, phase: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ phase as u64
}

/// `count` examples, example `i` drawn from stream `i` of a ChaCha generator
/// keyed by `base_seed`, so the result does not depend on the thread count.
pub fn generate_dataset(
    phase: usize,
    count: usize,
    grid: usize,
    obstacle_p: f64,
    base_seed: u64,
) -> Result<Vec<GridExample>> {
    validate_phase(phase)?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
            rng.set_stream(i as u64);
            generate_example(phase, grid, obstacle_p, &mut rng)
        })
        .collect()
}

/// Input `[N, 2, H, W]` (queries, obstacles) and target `[N, 1, H, W]` tensors.
pub fn batch_tensors(examples: &[&GridExample]) -> Result<(Tensor, Tensor)> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Usage("cannot batch zero examples".into()))?;
    let (h, w) = (first.height, first.width);
    let plane = h * w;
    let mut inputs = Vec::with_capacity(examples.len() * 2 * plane);
    let mut targets = Vec::with_capacity(examples.len() * plane);
    for ex in examples {
        if (ex.height, ex.width) != (h, w) {
            return Err(Error::Dimension("examples in a batch differ in grid size".into()));
        }
        inputs.extend(ex.query.iter().map(|&v| v as f64));
        inputs.extend(ex.obstacles.iter().map(|&v| v as f64));
        targets.extend(ex.label.iter().map(|&v| v as f64));
    }
    Ok((
        Tensor::new(&[examples.len(), 2, h, w], inputs)?,
        Tensor::new(&[examples.len(), 1, h, w], targets)?,
    ))
}

/// Pixel-level confusion counts, summed over any number of batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_masks(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Dimension(format!(
                "prediction has {} pixels, truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    /// Thresholds logits at 0, i.e. sigmoid > 0.5.
    pub fn from_logits(logits: &Tensor, targets: &Tensor) -> Result<Self> {
        crate::tensor::ensure_same_shape(logits, targets, "f1")?;
        let pred: Vec<bool> = logits.data().iter().map(|&z| z > 0.0).collect();
        let truth: Vec<bool> = targets.data().iter().map(|&t| t > 0.5).collect();
        Self::from_masks(&pred, &truth)
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }

    /// `2TP / (2TP + FP + FN)`, and 1 when both masks are empty.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Micro-averaged F1 over every pixel of the batch.
pub fn f1_score(pred: &[bool], truth: &[bool]) -> Result<f64> {
    Ok(Confusion::from_masks(pred, truth)?.f1())
}

pub fn write_dataset<W: Write>(mut w: W, examples: &[GridExample]) -> Result<()> {
    let (h, width) = examples
        .first()
        .map_or((DEFAULT_GRID, DEFAULT_GRID), |e| (e.height, e.width));
    let count = u32::try_from(examples.len())
        .map_err(|_| Error::Usage("too many examples for the dataset format".into()))?;
    let (h16, w16) = match (u16::try_from(h), u16::try_from(width)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(Error::Usage("grid too large for the dataset format".into())),
    };
    w.write_all(MAGIC)?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&h16.to_le_bytes())?;
    w.write_all(&w16.to_le_bytes())?;
    for ex in examples {
        if (ex.height, ex.width) != (h, width) {
            return Err(Error::Dimension("examples in a dataset differ in grid size".into()));
        }
        w.write_all(&ex.query)?;
        w.write_all(&ex.obstacles)?;
        w.write_all(&ex.label)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Vec<GridExample>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("dataset truncated before header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not an SPTH1 dataset (bad magic)".into()));
    }
    let mut header = [0u8; 8];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("dataset header truncated".into()))?;
    let count = u32::from_le_bytes(header[0..4].try_into().expect("4 bytes")) as usize;
    let h = u16::from_le_bytes(header[4..6].try_into().expect("2 bytes")) as usize;
    let w = u16::from_le_bytes(header[6..8].try_into().expect("2 bytes")) as usize;
    let plane = h * w;
    let mut examples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let mut buf = vec![0u8; 3 * plane];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("dataset truncated in example {i} of {count}")))?;
        if buf.iter().any(|&v| v > 1) {
            return Err(Error::Format(format!("example {i} has a non-binary plane value")));
        }
        let label = buf.split_off(2 * plane);
        let obstacles = buf.split_off(plane);
        examples.push(GridExample {
            height: h,
            width: w,
            query: buf,
            obstacles,
            label,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last example".into()));
    }
    Ok(examples)
}

pub fn save_dataset(path: &std::path::Path, examples: &[GridExample]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(std::io::BufWriter::new(file), examples)
}

pub fn load_dataset(path: &std::path::Path) -> Result<Vec<GridExample>> {
    let file = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty(n: usize) -> Vec<u8> {
        vec![0; n * n]
    }

    #[test]
    fn open_grid_rectangle_label() {
        let ex = GridExample::from_parts(5, 5, (0, 0), (2, 2), empty(5))
            .unwrap()
            .unwrap();
        assert_eq!(ex.label_count(), 7);
        for r in 0..5 {
            for c in 0..5 {
                let inside = r <= 2 && c <= 2 && (r, c) != (0, 0) && (r, c) != (2, 2);
                assert_eq!(ex.label[r * 5 + c] == 1, inside, "({r},{c})");
            }
        }
    }

    #[test]
    fn adjacent_queries_have_empty_label() {
        let ex = GridExample::from_parts(4, 4, (1, 1), (1, 2), empty(4))
            .unwrap()
            .unwrap();
        assert_eq!(ex.label_count(), 0);
    }

    #[test]
    fn wall_with_gap_routes_through_gap() {
        let n = 7;
        let mut obs = empty(n);
        for r in 0..n {
            if r != 5 {
                obs[r * n + 3] = 1;
            }
        }
        let ex = GridExample::from_parts(n, n, (1, 1), (1, 5), obs).unwrap().unwrap();
        assert_eq!(ex.label[5 * n + 3], 1);
        let d = bfs_distance_field(&ex.obstacles, n, n, (1, 1)).unwrap();
        assert_eq!(d[n + 5], Some(12));
    }

    #[test]
    fn enclosed_source() {
        let mut obs = empty(4);
        for i in [1, 4, 5] {
            obs[i] = 1;
        }
        let d = bfs_distance_field(&obs, 4, 4, (0, 0)).unwrap();
        assert_eq!(d[0], Some(0));
        assert!(d[1..].iter().all(|v| v.is_none()));
        assert!(GridExample::from_parts(4, 4, (0, 0), (3, 3), obs).unwrap().is_none());
    }

    #[test]
    fn empty_grid_is_manhattan() {
        let d = bfs_distance_field(&empty(6), 6, 6, (2, 3)).unwrap();
        for r in 0..6usize {
            for c in 0..6usize {
                assert_eq!(d[r * 6 + c], Some((r.abs_diff(2) + c.abs_diff(3)) as u32));
            }
        }
    }

    #[test]
    fn source_on_obstacle_is_usage_error() {
        let mut obs = empty(3);
        obs[4] = 1;
        assert!(matches!(
            bfs_distance_field(&obs, 3, 3, (1, 1)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn f1_examples() {
        let t = [true, true, true, false, false];
        assert_eq!(f1_score(&t, &t).unwrap(), 1.0);
        let p = [true, true, false, true, false];
        assert!((f1_score(&p, &t).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(f1_score(&[false; 5], &t).unwrap(), 0.0);
        assert_eq!(f1_score(&[false; 3], &[false; 3]).unwrap(), 1.0);
    }

    #[test]
    fn windows() {
        assert_eq!(CurriculumSpec::window(1), 5);
        assert_eq!(CurriculumSpec::window(5), 21);
    }

    #[test]
    fn generated_example_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for phase in 1..=5 {
            let ex = generate_example(phase, 32, 0.1, &mut rng).unwrap();
            let q = ex.queries();
            assert_eq!(q.len(), 2);
            let half = CurriculumSpec::window(phase) / 2;
            assert!(q[0].0.abs_diff(q[1].0) <= half && q[0].1.abs_diff(q[1].1) <= half);
            for i in 0..ex.query.len() {
                assert!(!(ex.query[i] == 1 && ex.obstacles[i] == 1));
                assert!(!(ex.label[i] == 1 && (ex.query[i] == 1 || ex.obstacles[i] == 1)));
            }
        }
    }

    #[test]
    fn full_obstacles_leave_only_adjacent_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let ex = generate_example(5, 16, 1.0, &mut rng).unwrap();
            let q = ex.queries();
            assert_eq!(q[0].0.abs_diff(q[1].0) + q[0].1.abs_diff(q[1].1), 1);
            assert_eq!(ex.label_count(), 0);
        }
        assert!(matches!(
            generate_example(1, 16, 1.5, &mut rng),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn dataset_round_trip_and_format() {
        let data = generate_dataset(2, 3, 8, 0.1, 42).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &data).unwrap();
        assert_eq!(&bytes[..6], b"SPTH1\n");
        assert_eq!(&bytes[6..10], &3u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &[8, 0, 8, 0]);
        assert_eq!(bytes.len(), 14 + 3 * 3 * 64);
        assert_eq!(read_dataset(&bytes[..]).unwrap(), data);
        assert!(matches!(read_dataset(&bytes[..20]), Err(Error::Format(_))));
    }

    #[test]
    fn empty_dataset_file() {
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &[]).unwrap();
        assert_eq!(bytes.len(), 14);
        assert_eq!(&bytes[6..10], &[0, 0, 0, 0]);
        assert!(read_dataset(&bytes[..]).unwrap().is_empty());
    }

    #[test]
    fn generation_is_thread_count_independent() {
        let a = generate_dataset(3, 20, 16, 0.1, 7).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| generate_dataset(3, 20, 16, 0.1, 7).unwrap());
        assert_eq!(a, b);
    }
}
