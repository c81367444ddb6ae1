use std::collections::BTreeSet;

use cotri::discordance::{chordal_distance, d1, find_path, traverse_chain};
use cotri::multiway::{association, vigorous, ClusterAssignment};
use cotri::ndiff::Mat;
use cotri::schema::{DType, Entity, MatrixDescriptor, RelationalCollection};
use cotri::trainer::FactorSet;
use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Orthonormal basis of the column space from the eigenvectors of `A·Aᵀ`.
fn eigen_basis(a: &Mat) -> Mat {
    let g = a * a.transpose();
    let eig = SymmetricEigen::new(g);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > 1e-12 * top)
        .collect();
    Mat::from_fn(a.nrows(), keep.len(), |i, j| eig.eigenvectors[(i, keep[j])])
}

/// `sqrt(min(p, q) − ‖QaᵀQb‖²_F)`, the root of the summed squared sines.
fn principal_angle_oracle(a: &Mat, b: &Mat) -> (f64, usize, usize) {
    let qa = eigen_basis(a);
    let qb = eigen_basis(b);
    let cos2 = (qa.transpose() * &qb).norm_squared();
    let r = qa.ncols().min(qb.ncols()) as f64;
    ((r - cos2).max(0.0).sqrt(), qa.ncols(), qb.ncols())
}

fn random_block(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let rank = if rng.gen_bool(0.3) { rng.gen_range(1..=cols) } else { cols };
    let l = Mat::from_fn(rows, rank, |_, _| rng.gen_range(-1.0..1.0));
    let r = Mat::from_fn(rank, cols, |_, _| rng.gen_range(-1.0..1.0));
    l * r
}

#[test]
fn chordal_distance_matches_principal_angle_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..50 {
        let n = rng.gen_range(6..15);
        let p = rng.gen_range(1..=n / 2);
        let q = rng.gen_range(1..=n / 2);
        let a = random_block(&mut rng, n, p);
        let b = random_block(&mut rng, n, q);
        let got = chordal_distance(&a, &b).unwrap();
        let (want, pa, qb) = principal_angle_oracle(&a, &b);
        assert_eq!((got.p, got.q), (pa, qb), "trial {trial}: ranks");
        assert!((got.distance - want).abs() < 1e-10, "trial {trial}: {} vs {}", got.distance, want);
        assert!(got.distance >= 0.0);
        assert!(got.distance <= (got.p.min(got.q) as f64).sqrt() + 1e-12);
    }
}

#[test]
fn chordal_distance_is_symmetric_and_basis_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_block(&mut rng, 10, 3);
    let b = random_block(&mut rng, 10, 4);
    let mix = Mat::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.5 });
    let ab = chordal_distance(&a, &b).unwrap().distance;
    let ba = chordal_distance(&b, &a).unwrap().distance;
    let mixed = chordal_distance(&(&a * mix), &b).unwrap().distance;
    assert!((ab - ba).abs() < 1e-12);
    assert!((ab - mixed).abs() < 1e-10);
}

/// Connected collection on `n` entities: a random spanning tree plus extra
/// random relations.
fn random_graph(rng: &mut ChaCha8Rng, n: usize, extra: usize) -> RelationalCollection {
    let entities: Vec<Entity> = (0..n)
        .map(|id| Entity {
            id,
            name: format!("e{id}"),
            count: 3,
            labels: None,
        })
        .collect();
    let mut pairs = Vec::new();
    for e in 1..n {
        pairs.push((rng.gen_range(0..e), e));
    }
    for _ in 0..extra {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            pairs.push((a, b));
        }
    }
    let matrices = pairs
        .into_iter()
        .enumerate()
        .map(|(id, (r, c))| MatrixDescriptor {
            id,
            name: format!("m{id}"),
            row_entity: r,
            col_entity: c,
            dtype: DType::Binary,
            values: Mat::from_element(3, 3, 1.0),
        })
        .collect();
    RelationalCollection::new(entities, matrices).unwrap()
}

/// Length of the shortest route by exhaustive search over simple paths.
fn shortest_by_enumeration(
    c: &RelationalCollection,
    at: usize,
    goal: usize,
    subset: &BTreeSet<usize>,
    visited: &mut Vec<usize>,
) -> Option<usize> {
    if at == goal {
        return Some(0);
    }
    let mut best: Option<usize> = None;
    for m in subset {
        let md = c.matrix(*m);
        let Some(next) = md.other(at) else { continue };
        if visited.contains(&next) {
            continue;
        }
        visited.push(next);
        if let Some(d) = shortest_by_enumeration(c, next, goal, subset, visited) {
            best = Some(best.map_or(d + 1, |b: usize| b.min(d + 1)));
        }
        visited.pop();
    }
    best
}

#[test]
fn find_path_is_shortest_and_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..40 {
        let n = rng.gen_range(3..7);
        let extra = rng.gen_range(0..4);
        let c = random_graph(&mut rng, n, extra);
        let subset: BTreeSet<usize> = (0..c.num_matrices()).filter(|_| rng.gen_bool(0.7)).collect();
        if subset.is_empty() {
            continue;
        }
        let (i, j) = (0, n - 1);
        let want = shortest_by_enumeration(&c, i, j, &subset, &mut vec![i]);
        match (find_path(&c, i, j, &subset), want) {
            (Ok(p), Some(len)) => {
                assert_eq!(p.len(), len);
                assert_eq!(p.entities[0], i);
                assert_eq!(*p.entities.last().unwrap(), j);
                for (s, m) in p.matrices.iter().enumerate() {
                    assert!(subset.contains(m));
                    let md = c.matrix(*m);
                    let ends = [md.row_entity, md.col_entity];
                    assert!(ends.contains(&p.entities[s]) && ends.contains(&p.entities[s + 1]));
                }
            }
            (Err(_), None) => {}
            (got, want) => panic!("find_path {got:?} but enumeration {want:?}"),
        }
    }
}

fn factors(c: &RelationalCollection, labels: Vec<Vec<usize>>, k: usize, x_rec: Vec<Mat>) -> FactorSet {
    let clusters: Vec<ClusterAssignment> = labels
        .into_iter()
        .map(|l| ClusterAssignment::from_labels(l, k).unwrap())
        .collect();
    let j: Vec<Mat> = clusters.iter().map(vigorous).collect();
    let a = c
        .matrices()
        .iter()
        .map(|m| association(&m.values, &j[m.row_entity], &j[m.col_entity]).unwrap())
        .collect();
    FactorSet {
        u: Vec::new(),
        c: Vec::new(),
        i: clusters.iter().map(|a| a.indicator()).collect(),
        j,
        a,
        x_rec,
        clusters,
    }
}

fn naive_cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 && nb == 0.0 {
        0.0
    } else if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na.sqrt() * nb.sqrt())
    }
}

#[test]
fn d1_matches_naive_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let counts = [7, 6, 8];
        let entities: Vec<Entity> = (0..3)
            .map(|id| Entity {
                id,
                name: format!("e{id}"),
                count: counts[id],
                labels: None,
            })
            .collect();
        // e0 is the row side of m0, e1 the column side of m1
        let shapes = [(0, 1), (2, 1)];
        let matrices: Vec<MatrixDescriptor> = shapes
            .iter()
            .enumerate()
            .map(|(id, &(r, c))| MatrixDescriptor {
                id,
                name: format!("m{id}"),
                row_entity: r,
                col_entity: c,
                dtype: DType::Real,
                values: Mat::from_fn(counts[r], counts[c], |_, _| rng.gen_range(0.0..1.0)),
            })
            .collect();
        let c = RelationalCollection::new(entities, matrices).unwrap();
        let k = 2;
        // every cluster non-empty
        let labels: Vec<Vec<usize>> = counts
            .iter()
            .map(|&n| (0..n).map(|i| if i < k { i } else { rng.gen_range(0..k) }).collect())
            .collect();
        let x_rec: Vec<Mat> = c
            .matrices()
            .iter()
            .map(|m| m.values.map(|v| v + rng.gen_range(-0.5..0.5)))
            .collect();
        let f = factors(&c, labels.clone(), k, x_rec.clone());
        let path = find_path(&c, 0, 2, &BTreeSet::from([0, 1])).unwrap();
        for u in 0..k {
            let chain = traverse_chain(&c, &path, u, &f).unwrap();
            let mut expected = 0.0;
            for b in &chain.blocks {
                let m = b.input.matrix;
                let rows: Vec<usize> = (0..labels[c.matrix(m).row_entity].len())
                    .filter(|&i| labels[c.matrix(m).row_entity][i] == b.input.u)
                    .collect();
                let cols: Vec<usize> = (0..labels[c.matrix(m).col_entity].len())
                    .filter(|&j| labels[c.matrix(m).col_entity][j] == b.input.v)
                    .collect();
                let mut total = 0.0;
                for &r in &rows {
                    let a: Vec<f64> = cols.iter().map(|&j| c.matrix(m).values[(r, j)]).collect();
                    let b: Vec<f64> = cols.iter().map(|&j| x_rec[m][(r, j)]).collect();
                    total += naive_cosine_distance(&a, &b);
                }
                expected += total / rows.len() as f64;
            }
            assert!((d1(&chain) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn basis_spans_rank_deficient_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let n = rng.gen_range(2..20);
        let p = rng.gen_range(1..12);
        let a = random_block(&mut rng, n, p);
        let q = cotri::discordance::column_basis(&a);
        let k = q.ncols();
        assert!((q.transpose() * &q - Mat::identity(k, k)).norm() < 1e-12);
        assert!((&a - &q * (q.transpose() * &a)).norm() <= 1e-10 * a.norm());
        assert_eq!(k, eigen_basis(&a).ncols());
    }
}
