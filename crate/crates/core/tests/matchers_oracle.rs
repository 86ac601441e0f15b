use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use sloop_core::ensemble::{bagged_score, BagParams};
use sloop_core::matchers::classical::{pair_score_classical, MethodId, PreparedImage};
use sloop_core::matchers::features::{FeatureSet, Point};
use sloop_core::matchers::ransac::{apply, ransac_match, Affine, RansacParams};
use sloop_core::params::MatchParams;
use sloop_core::synthpop::{generate_population, write_population, SyntheticSpec};

fn descriptor(r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..24).map(|_| r.gen::<f64>()).collect()
}

fn planted(theta_deg: f64, scale: f64, tx: f64, ty: f64) -> Affine {
    let (s, c) = theta_deg.to_radians().sin_cos();
    [[scale * c, -scale * s, tx], [scale * s, scale * c, ty]]
}

/// `b` holds the image of `a` under `t` in shuffled order, with a fraction of
/// entries replaced by unrelated points. Returns the true pairs `(i, j)`.
fn constellation_pair(seed: u64, n: usize, outliers: usize, t: &Affine) -> (FeatureSet, FeatureSet, Vec<(usize, usize)>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let pos: Vec<Point> = (0..n).map(|_| Point::new(r.gen_range(20.0..220.0), r.gen_range(20.0..220.0))).collect();
    let desc: Vec<Vec<f64>> = (0..n).map(|_| descriptor(&mut r)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut b_pos = vec![Point::new(0.0, 0.0); n];
    let mut b_desc = vec![None; n];
    let mut truth = Vec::new();
    for (i, &j) in order.iter().enumerate() {
        if i < outliers {
            b_pos[j] = Point::new(r.gen_range(0.0..260.0), r.gen_range(0.0..260.0));
            b_desc[j] = Some(descriptor(&mut r));
        } else {
            let q = apply(t, pos[i]);
            b_pos[j] = Point::new(q.x + r.gen_range(-0.05..0.05), q.y + r.gen_range(-0.05..0.05));
            b_desc[j] = Some(desc[i].iter().map(|v| v + r.gen_range(-0.01..0.01)).collect());
            truth.push((i, j));
        }
    }
    let a = FeatureSet {
        positions: pos,
        descriptors: desc.into_iter().map(Some).collect(),
    };
    let b = FeatureSet {
        positions: b_pos,
        descriptors: b_desc,
    };
    (a, b, truth)
}

fn ransac_params(seed: u64) -> RansacParams {
    RansacParams {
        seed,
        ..RansacParams::from(&MatchParams::default())
    }
}

#[test]
fn planted_affine_is_recovered_despite_outliers() {
    let mut recovered = 0;
    for seed in 0..100u64 {
        let t = planted(10.0, 1.05, 7.0 + seed as f64 % 5.0, -4.0);
        let (a, b, truth) = constellation_pair(seed, 20, 4, &t);
        let m = ransac_match(&a, &b, &ransac_params(seed));
        let Some(fit) = m.affine else { continue };
        let err: f64 = truth
            .iter()
            .map(|&(i, j)| {
                let p = apply(&fit, a.positions[i]);
                let q = b.positions[j];
                ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt()
            })
            .sum::<f64>()
            / truth.len() as f64;
        if err <= 0.5 {
            recovered += 1;
        }
    }
    assert!(recovered >= 99, "{recovered}/100");
}

/// A minimal fit explains three correspondences exactly. A fourth unrelated
/// point can still land inside the tolerance by chance, so the strict bound
/// holds for most but not all seeds; the count is reported.
#[test]
fn disjoint_constellations_only_fit_minimal_samples() {
    let mut within = 0;
    for seed in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 7000);
        let (na, nb) = (r.gen_range(8..25), r.gen_range(8..25));
        let mut set = |n: usize| FeatureSet {
            positions: (0..n).map(|_| Point::new(r.gen_range(20.0..220.0), r.gen_range(20.0..220.0))).collect(),
            descriptors: (0..n).map(|_| Some(descriptor(&mut r))).collect(),
        };
        let (a, b) = (set(na), set(nb));
        let m = ransac_match(&a, &b, &ransac_params(seed));
        let floor = na.min(nb) as f64;
        if m.score <= 3.0 / floor + 1e-12 {
            within += 1;
        }
        assert!(m.inlier_count() <= 4, "seed {seed}: {} inliers", m.inlier_count());
    }
    println!("disjoint constellations within 3/min(n): {within}/100");
    assert!(within >= 90, "{within}/100");
}

fn prepared_pair() -> (PreparedImage, PreparedImage, MatchParams) {
    let pop = generate_population(&SyntheticSpec {
        n_individuals: 2,
        sightings_per_individual: 2,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let params = MatchParams::default();
    let prep = |k: usize| {
        let im = &pop.images[k];
        PreparedImage::new(im.id.clone(), &im.grid(), &im.fiducials, &params).unwrap()
    };
    (prep(0), prep(1), params)
}

#[test]
fn single_full_bag_equals_the_plain_method() {
    let (a, b, params) = prepared_pair();
    let bag = BagParams {
        bags: 1,
        subset_fraction: 1.0,
        seed: 3,
    };
    for m in [MethodId::DescriptorCosine, MethodId::Ransac, MethodId::Deformation] {
        let plain = pair_score_classical(&a, &b, m, &params, None).unwrap().raw;
        assert_eq!(bagged_score(&a, &b, m, &bag, &params, None).unwrap().raw, plain, "{m:?}");
    }
}

#[test]
fn bagging_is_reproducible_under_its_seed() {
    let (a, b, params) = prepared_pair();
    let bag = |seed| BagParams {
        bags: 5,
        subset_fraction: 0.5,
        seed,
    };
    let s1 = bagged_score(&a, &b, MethodId::DescriptorCosine, &bag(4), &params, None).unwrap();
    let s2 = bagged_score(&a, &b, MethodId::DescriptorCosine, &bag(4), &params, None).unwrap();
    assert_eq!(s1, s2);
    assert!((0.0..=1.0).contains(&s1.raw));
    let zero = BagParams { bags: 0, ..bag(4) };
    assert!(bagged_score(&a, &b, MethodId::DescriptorCosine, &zero, &params, None).is_err());
}

fn directory_digest(dir: &Path) -> String {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for (name, bytes) in files {
        h.update(name.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn population_directory_digest_depends_only_on_the_seed() {
    let digest = |seed| {
        let spec = SyntheticSpec {
            n_individuals: 4,
            sightings_per_individual: 3,
            seed,
            ..SyntheticSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        write_population(&generate_population(&spec).unwrap(), dir.path()).unwrap();
        directory_digest(dir.path())
    };
    let first = digest(11);
    assert_eq!(first, digest(11));
    assert_ne!(first, digest(12));
}

/// Deformation alone is a weak matcher; it separates individuals well above
/// chance but far from perfectly.
#[test]
fn deformation_prefers_the_same_individual() {
    let pop = generate_population(&SyntheticSpec::default()).unwrap();
    let params = MatchParams::default();
    let prepared: Vec<PreparedImage> = pop
        .images
        .iter()
        .map(|im| PreparedImage::new(im.id.clone(), &im.grid(), &im.fiducials, &params).unwrap())
        .collect();
    let score = |i: usize, j: usize| pair_score_classical(&prepared[i], &prepared[j], MethodId::Deformation, &params, None).unwrap().raw;
    let mut r = ChaCha8Rng::seed_from_u64(500);
    let n = pop.images.len();
    let mut wins = 0;
    for _ in 0..500 {
        let q = r.gen_range(0..n);
        let mates: Vec<usize> = (0..n).filter(|&k| k != q && pop.images[k].individual == pop.images[q].individual).collect();
        let mate = mates[r.gen_range(0..mates.len())];
        let other = loop {
            let k = r.gen_range(0..n);
            if pop.images[k].individual != pop.images[q].individual {
                break k;
            }
        };
        if score(q, mate) > score(q, other) {
            wins += 1;
        }
    }
    println!("deformation same > different: {wins}/500");
    assert!(wins >= 325, "{wins}/500");
}
