use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softshare::task::{
    bfs_distance_field, generate_dataset, phase_seed, shortest_path_label, Cell, GridExample,
};

/// Bellman-Ford style relaxation to a fixpoint; independent of the BFS queue.
fn relaxation_distances(obstacles: &[u8], h: usize, w: usize, src: Cell) -> Vec<Option<u32>> {
    let mut d: Vec<Option<u32>> = vec![None; h * w];
    d[src.0 * w + src.1] = Some(0);
    loop {
        let mut changed = false;
        for r in 0..h {
            for c in 0..w {
                if obstacles[r * w + c] != 0 {
                    continue;
                }
                let mut best = d[r * w + c];
                let nbrs = [(r > 0).then(|| (r - 1, c)), (r + 1 < h).then(|| (r + 1, c)), (c > 0).then(|| (r, c - 1)), (c + 1 < w).then(|| (r, c + 1))];
                for (nr, nc) in nbrs.into_iter().flatten() {
                    if let Some(nd) = d[nr * w + nc] {
                        if best.is_none_or(|b| nd + 1 < b) {
                            best = Some(nd + 1);
                        }
                    }
                }
                if best != d[r * w + c] {
                    d[r * w + c] = best;
                    changed = true;
                }
            }
        }
        if !changed {
            return d;
        }
    }
}

/// Union of all shortest paths found by exhaustive depth-first enumeration.
fn enumerated_label(obstacles: &[u8], h: usize, w: usize, q1: Cell, q2: Cell) -> Option<Vec<u8>> {
    fn dfs(
        cur: Cell,
        goal: Cell,
        budget: u32,
        ctx: (&[u8], usize, usize),
        path: &mut Vec<Cell>,
        best: &mut Option<(u32, Vec<u8>)>,
    ) {
        let (obs, h, w) = ctx;
        let len = path.len() as u32 - 1;
        if let Some((b, _)) = best {
            if len > *b {
                return;
            }
        }
        if len > budget {
            return;
        }
        if cur == goal {
            let mut cells = vec![0u8; h * w];
            for &(r, c) in &path[1..path.len() - 1] {
                cells[r * w + c] = 1;
            }
            match best {
                Some((b, union)) if *b == len => union.iter_mut().zip(&cells).for_each(|(u, v)| *u |= v),
                _ => *best = Some((len, cells)),
            }
            return;
        }
        let (r, c) = cur;
        let nbrs = [(r > 0).then(|| (r - 1, c)), (r + 1 < h).then(|| (r + 1, c)), (c > 0).then(|| (r, c - 1)), (c + 1 < w).then(|| (r, c + 1))];
        for n in nbrs.into_iter().flatten() {
            if obs[n.0 * w + n.1] == 0 && !path.contains(&n) {
                path.push(n);
                dfs(n, goal, budget, ctx, path, best);
                path.pop();
            }
        }
    }
    let mut best = None;
    dfs(q1, q2, (h * w) as u32, (obstacles, h, w), &mut vec![q1], &mut best);
    best.map(|(_, cells)| cells)
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Vec<u8> {
    (0..h * w).map(|_| u8::from(rng.random::<f64>() < p)).collect()
}

#[test]
fn bfs_matches_relaxation_oracle_seed_13() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(2..40), rng.random_range(2..40));
        let mut obs = random_grid(&mut rng, h, w, 0.3);
        let src = (rng.random_range(0..h), rng.random_range(0..w));
        obs[src.0 * w + src.1] = 0;
        assert_eq!(
            bfs_distance_field(&obs, h, w, src).unwrap(),
            relaxation_distances(&obs, h, w, src)
        );
    }
}

#[test]
fn labels_match_exhaustive_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut compared = 0;
    while compared < 200 {
        let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
        let mut obs = random_grid(&mut rng, h, w, 0.25);
        let q1 = (rng.random_range(0..h), rng.random_range(0..w));
        let q2 = (rng.random_range(0..h), rng.random_range(0..w));
        if q1 == q2 {
            continue;
        }
        obs[q1.0 * w + q1.1] = 0;
        obs[q2.0 * w + q2.1] = 0;
        let ours = shortest_path_label(&obs, h, w, q1, q2).unwrap();
        assert_eq!(ours, enumerated_label(&obs, h, w, q1, q2), "{h}x{w} {q1:?}->{q2:?} {obs:?}");
        compared += 1;
    }
}

#[test]
fn generated_labels_satisfy_distance_sum_oracle() {
    for phase in 1..=5 {
        for ex in generate_dataset(phase, 50, 32, 0.1, phase_seed(13, phase)).unwrap() {
            let q = ex.queries();
            assert_eq!(q.len(), 2);
            let d1 = relaxation_distances(&ex.obstacles, 32, 32, q[0]);
            let d2 = relaxation_distances(&ex.obstacles, 32, 32, q[1]);
            let total = d1[q[1].0 * 32 + q[1].1].expect("generated pairs are reachable");
            for i in 0..32 * 32 {
                let on_path = matches!((d1[i], d2[i]), (Some(a), Some(b)) if a + b == total);
                let expected = on_path && ex.query[i] == 0;
                assert_eq!(ex.label[i] == 1, expected, "cell {i}");
                assert!(!(ex.obstacles[i] == 1 && ex.query[i] == 1));
            }
        }
    }
}

#[test]
fn query_distance_grows_with_phase() {
    let dist = |ex: &GridExample| {
        let q = ex.queries();
        let d = bfs_distance_field(&ex.obstacles, 32, 32, q[0]).unwrap();
        d[q[1].0 * 32 + q[1].1].unwrap() as usize
    };
    let cdfs: Vec<Vec<f64>> = (1..=5)
        .map(|p| {
            let ds: Vec<usize> = generate_dataset(p, 2000, 32, 0.1, phase_seed(7, p))
                .unwrap()
                .iter()
                .map(dist)
                .collect();
            (0..64)
                .map(|t| ds.iter().filter(|&&d| d <= t).count() as f64 / ds.len() as f64)
                .collect()
        })
        .collect();
    for p in 0..4 {
        for t in 0..64 {
            // Later phases must put no more mass at or below any distance.
            assert!(cdfs[p + 1][t] <= cdfs[p][t] + 0.02, "phase {} vs {} at d={t}", p + 2, p + 1);
        }
    }
}

#[test]
fn distinct_phase_seeds_give_unrelated_data() {
    let a = generate_dataset(1, 200, 16, 0.1, phase_seed(0, 1)).unwrap();
    let b = generate_dataset(2, 200, 16, 0.1, phase_seed(0, 2)).unwrap();
    let shared = a
        .iter()
        .filter(|x| b.iter().any(|y| y.obstacles == x.obstacles))
        .count();
    assert_eq!(shared, 0);
}

proptest! {
    #[test]
    fn label_is_symmetric_in_the_queries(
        seed in any::<u64>(),
        h in 2usize..12,
        w in 2usize..12,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut obs = random_grid(&mut rng, h, w, 0.3);
        let q1 = (rng.random_range(0..h), rng.random_range(0..w));
        let q2 = (rng.random_range(0..h), rng.random_range(0..w));
        prop_assume!(q1 != q2);
        obs[q1.0 * w + q1.1] = 0;
        obs[q2.0 * w + q2.1] = 0;
        prop_assert_eq!(
            shortest_path_label(&obs, h, w, q1, q2).unwrap(),
            shortest_path_label(&obs, h, w, q2, q1).unwrap()
        );
    }

    #[test]
    fn open_grid_distance_is_manhattan(h in 1usize..20, w in 1usize..20, r in 0usize..20, c in 0usize..20) {
        let src = (r % h, c % w);
        let d = bfs_distance_field(&vec![0; h * w], h, w, src).unwrap();
        for (i, v) in d.iter().enumerate() {
            let (rr, cc) = (i / w, i % w);
            prop_assert_eq!(*v, Some((rr.abs_diff(src.0) + cc.abs_diff(src.1)) as u32));
        }
    }
}
