use cotri::eval::{ami, ari, eigh_oracle, gen_planted_discordance, nmi, ri, DiscordanceSpec};
use cotri::ndiff::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// ARI and RI from explicit pair enumeration.
fn pair_counting(truth: &[usize], pred: &[usize]) -> (f64, f64) {
    let n = truth.len();
    let (mut both, mut only_t, mut only_p, mut neither) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            match (truth[i] == truth[j], pred[i] == pred[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_t += 1.0,
                (false, true) => only_p += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let pairs = both + only_t + only_p + neither;
    let rand_index = (both + neither) / pairs;
    let same_t = both + only_t;
    let same_p = both + only_p;
    let expected = same_t * same_p / pairs;
    let max = 0.5 * (same_t + same_p);
    let adjusted = if max == expected { 1.0 } else { (both - expected) / (max - expected) };
    (adjusted, rand_index)
}

#[test]
fn ari_and_ri_match_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..30 {
        let n = rng.gen_range(5..40);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let (a, r) = pair_counting(&truth, &pred);
        assert!((ari(&truth, &pred).unwrap() - a).abs() < 1e-12);
        assert!((ri(&truth, &pred).unwrap() - r).abs() < 1e-12);
    }
}

#[test]
fn chance_adjusted_metrics_center_on_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut sa, mut sm) = (0.0, 0.0);
    for _ in 0..50 {
        let truth: Vec<usize> = (0..200).map(|_| rng.gen_range(0..3)).collect();
        let pred: Vec<usize> = (0..200).map(|_| rng.gen_range(0..3)).collect();
        sa += ari(&truth, &pred).unwrap();
        sm += ami(&truth, &pred).unwrap();
    }
    assert!((sa / 50.0).abs() <= 0.05, "ARI mean {}", sa / 50.0);
    assert!((sm / 50.0).abs() <= 0.05, "AMI mean {}", sm / 50.0);
}

#[test]
fn metrics_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..30 {
        let truth: Vec<usize> = (0..50).map(|_| rng.gen_range(0..5)).collect();
        let pred: Vec<usize> = (0..50).map(|_| rng.gen_range(0..2)).collect();
        for v in [ari(&truth, &pred).unwrap(), ami(&truth, &pred).unwrap()] {
            assert!((-1.0..=1.0).contains(&v));
        }
        for v in [nmi(&truth, &pred).unwrap(), ri(&truth, &pred).unwrap()] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

fn random_orthonormal(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Mat {
    let g = Mat::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0));
    g.qr().q()
}

#[test]
fn eigh_trace_bounds_random_probes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = Mat::from_fn(20, 20, |_, _| rng.gen_range(-1.0..1.0));
    let l = &b * b.transpose();
    let (c, tmin) = eigh_oracle(&l, 3).unwrap();
    assert!(((c.transpose() * &l * &c).trace() - tmin).abs() < 1e-8);
    assert!((c.transpose() * &c - Mat::identity(3, 3)).norm() < 1e-10);
    for _ in 0..100 {
        let q = random_orthonormal(&mut rng, 20, 3);
        assert!(tmin <= (q.transpose() * &l * &q).trace() + 1e-10);
    }
    assert_eq!(eigh_oracle(&Mat::zeros(5, 5), 2).unwrap().1, 0.0);
    let mut asym = Mat::identity(3, 3);
    asym[(0, 1)] = 1.0;
    assert!(eigh_oracle(&asym, 1).is_err());
}

#[test]
fn planted_discordance_hides_cells_of_one_knowledge_block() {
    for seed in 0..5 {
        let spec = DiscordanceSpec {
            count: 45,
            hide_fraction: 0.5,
            ..Default::default()
        };
        let pd = gen_planted_discordance(&spec, seed).unwrap();
        let full = gen_planted_discordance(&DiscordanceSpec { hide_fraction: 0.0, ..spec.clone() }, seed)
            .unwrap();
        let k = pd.knowledge[0];
        let (u, v) = pd.hidden_block;
        let md = pd.collection.matrix(k);
        let rows = &pd.labels[md.row_entity];
        let cols = &pd.labels[md.col_entity];
        let block_nnz = (0..rows.len())
            .flat_map(|i| (0..cols.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| rows[i] == u && cols[j] == v && full.collection.matrix(k).values[(i, j)] != 0.0)
            .count();
        assert_eq!(pd.mask.len(), (0.5 * block_nnz as f64).ceil() as usize);
        for &(m, i, j) in &pd.mask {
            assert_eq!(m, k);
            assert_eq!((rows[i], cols[j]), (u, v));
            assert_eq!(md.values[(i, j)], 0.0);
            assert_eq!(full.collection.matrix(k).values[(i, j)], 1.0);
        }
        assert_eq!(
            full.collection.total_nnz() - pd.collection.total_nnz(),
            pd.mask.len()
        );
    }
}
