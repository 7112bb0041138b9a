use lpstream::hashing::{SeedSet, TAG_HEAVY_HITTERS, TAG_P_SAMPLER};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi_square_p(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expect = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn buckets_are_uniform() {
    let seeds = SeedSet::new(17, TAG_HEAVY_HITTERS);
    for r in [2usize, 7, 64, 1000] {
        for j in [0usize, 3] {
            let mut counts = vec![0usize; r];
            for i in 0..(200 * r as u64) {
                counts[seeds.bucket_of(i, j, r)] += 1;
            }
            let p = chi_square_p(&counts);
            assert!(p > 1e-4, "r={r} j={j}: chi-square p-value {p}");
        }
    }
}

#[test]
fn scales_are_uniform_and_open() {
    let keys = SeedSet::new(3, TAG_P_SAMPLER).keys();
    let mut counts = vec![0usize; 50];
    for i in 0..100_000u64 {
        let t = keys.scale_of(i);
        assert!(t > 0.0 && t < 1.0);
        counts[(t * 50.0) as usize] += 1;
    }
    assert!(chi_square_p(&counts) > 1e-4);
}

#[test]
fn signs_are_balanced_and_uncorrelated() {
    let seeds = SeedSet::new(99, TAG_HEAVY_HITTERS);
    let n = 100_000u64;
    let s0: Vec<f64> = (0..n).map(|i| seeds.sign_of(i, 0)).collect();
    let s1: Vec<f64> = (0..n).map(|i| seeds.sign_of(i, 1)).collect();
    let mean = s0.iter().sum::<f64>() / n as f64;
    let corr = s0.iter().zip(&s1).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let lag = s0.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / n as f64;
    let bound = 4.0 / (n as f64).sqrt();
    assert!(mean.abs() < bound && corr.abs() < bound && lag.abs() < bound, "{mean} {corr} {lag}");
}

#[test]
fn tags_and_seeds_separate_streams() {
    let a = SeedSet::new(5, TAG_HEAVY_HITTERS);
    let b = a.with_tag(TAG_P_SAMPLER);
    let c = SeedSet::new(6, TAG_HEAVY_HITTERS);
    let same_ab = (0..1000u64).filter(|&i| a.bucket_of(i, 0, 1 << 20) == b.bucket_of(i, 0, 1 << 20)).count();
    let same_ac = (0..1000u64).filter(|&i| a.scale_of(i) == c.scale_of(i)).count();
    assert!(same_ab < 3 && same_ac == 0);
    assert_eq!(a.bucket_of(12, 4, 97), SeedSet::new(5, TAG_HEAVY_HITTERS).bucket_of(12, 4, 97));
}
