//! Ranks and recall against a full sort of every candidate list.

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2i_core::retrieval::{
    ci95, evaluate_retrieval, rank_caption_to_image, rank_image_to_caption, summarize,
    RetrievalDirection,
};
use s2i_reference::brute::sorted_candidates;

struct Set {
    caps: Array2<f32>,
    imgs: Array2<f32>,
    truth: Vec<usize>,
}

fn random_set(rng: &mut ChaCha8Rng) -> Set {
    let n_img = rng.gen_range(2..30);
    let per = rng.gen_range(1..4);
    let d = rng.gen_range(2..9);
    let mut draw = |r, c| Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0f32..1.0));
    let mut imgs = draw(n_img, d);
    let mut caps = draw(n_img * per, d);
    // duplicated rows produce exact ties whichever way the cosine is rounded
    for m in [&mut imgs, &mut caps] {
        for _ in 0..m.nrows() / 3 {
            let (a, b) = (rng.gen_range(0..m.nrows()), rng.gen_range(0..m.nrows()));
            let src = m.row(a).to_owned();
            m.row_mut(b).assign(&src);
        }
    }
    let truth = (0..n_img * per).map(|c| c / per).collect();
    Set { caps, imgs, truth }
}

#[test]
fn ranks_match_full_sort_on_100_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let s = random_set(&mut rng);
        let c2i = rank_caption_to_image(s.caps.view(), s.imgs.view(), &s.truth).unwrap();
        for (c, &r) in c2i.iter().enumerate() {
            let order = sorted_candidates(s.caps.row(c).as_slice().unwrap(), &s.imgs);
            assert_eq!(r, 1 + order.iter().position(|&i| i == s.truth[c]).unwrap());
        }
        let mut sets = vec![Vec::new(); s.imgs.nrows()];
        for (c, &i) in s.truth.iter().enumerate() {
            sets[i].push(c);
        }
        let i2c = rank_image_to_caption(s.imgs.view(), s.caps.view(), &sets).unwrap();
        for (i, &r) in i2c.iter().enumerate() {
            let order = sorted_candidates(s.imgs.row(i).as_slice().unwrap(), &s.caps);
            assert_eq!(
                r,
                1 + order.iter().position(|c| sets[i].contains(c)).unwrap()
            );
        }
        let res = evaluate_retrieval(s.caps.view(), s.imgs.view(), &s.truth).unwrap();
        for n in [1, 5, 10] {
            let want = 100.0 * c2i.iter().filter(|&&r| r <= n).count() as f64 / c2i.len() as f64;
            assert_eq!(res.caption_to_image.recall(n), want);
            let want = 100.0 * i2c.iter().filter(|&&r| r <= n).count() as f64 / i2c.len() as f64;
            assert_eq!(res.image_to_caption.recall(n), want);
        }
        let mut sorted = c2i.clone();
        sorted.sort_unstable();
        let m = sorted.len();
        let med = if m % 2 == 1 {
            sorted[m / 2] as f64
        } else {
            (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0
        };
        assert_eq!(res.caption_to_image.median_rank, med);
    }
}

#[test]
fn table_interval_is_about_1_3_points() {
    assert!((ci95(0.376, 5000) - 1.3).abs() < 0.05);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let a = Array2::<f32>::ones((3, 4));
    let b = Array2::<f32>::ones((2, 4));
    assert!(rank_caption_to_image(a.view(), b.view(), &[0, 1]).is_err());
    assert!(rank_caption_to_image(a.view(), b.view(), &[0, 1, 2]).is_err());
    let wide = Array2::<f32>::ones((2, 5));
    assert!(rank_caption_to_image(a.view(), wide.view(), &[0, 1, 1]).is_err());
    let zero = Array2::<f32>::zeros((2, 4));
    assert!(rank_caption_to_image(a.view(), zero.view(), &[0, 1, 1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranks_ignore_positive_row_scaling(seed in any::<u64>(), shift in -6i32..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_set(&mut rng);
        let base = rank_caption_to_image(s.caps.view(), s.imgs.view(), &s.truth).unwrap();
        // power-of-two factors leave every cosine bit-identical
        let mut caps = s.caps.clone();
        for (i, mut row) in caps.rows_mut().into_iter().enumerate() {
            let k = 2f32.powi(shift + (i % 3) as i32);
            row.mapv_inplace(|v| v * k);
        }
        let scaled = rank_caption_to_image(caps.view(), s.imgs.view(), &s.truth).unwrap();
        prop_assert_eq!(base, scaled);
    }

    #[test]
    fn recall_is_monotone_and_bounded(ranks in prop::collection::vec(1usize..200, 1..300)) {
        let r = summarize(&ranks, RetrievalDirection::CaptionToImage).unwrap();
        prop_assert!(r.recall(1) <= r.recall(5));
        prop_assert!(r.recall(5) <= r.recall(10));
        prop_assert!((0.0..=100.0).contains(&r.recall(10)));
        prop_assert!(r.median_rank >= 1.0);
        for n in [1, 5, 10] {
            prop_assert!(r.ci95[&n] >= 0.0 && r.ci95[&n] <= 100.0);
        }
    }
}
