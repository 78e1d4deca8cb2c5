//! Closed-form loss arithmetic, invariants, and the inner-product identity
//! for the matching loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use veil_core::data::AttributeVector;
use veil_core::loss::{
    loss_attr, loss_d_src, loss_g_match, loss_g_rec, loss_g_src, total_d_loss, total_g_loss,
    AdversarialVariant, DLossParts, GLossParts, LossWeights,
};
use veil_tensor::Tensor;

fn t(values: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(values.to_vec(), &[values.len(), 1])
}

#[test]
fn d_src_log_closed_forms() {
    let v = AdversarialVariant::log_loss();
    // perfect discriminator: p_real = 1, p_fake = 0 -> 0 (up to the clamp)
    let (loss, clamps) = loss_d_src(&t(&[1.0]), &t(&[0.0]), &v, None);
    assert!(loss.item().abs() < 1e-6);
    assert_eq!(clamps, 2, "p = 0 and p = 1 must be flagged as clamped");

    // p_real = p_fake = 0.5 -> 2 ln 2
    let (loss, clamps) = loss_d_src(&t(&[0.5]), &t(&[0.5]), &v, None);
    assert!((loss.item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(clamps, 0);
}

#[test]
fn d_src_wasserstein_mean_difference() {
    let v = AdversarialVariant::wasserstein(10.0);
    let (loss, clamps) = loss_d_src(&t(&[2.0]), &t(&[-1.0]), &v, None);
    assert_eq!(loss.item(), -3.0);
    assert_eq!(clamps, 0);

    // penalty term enters scaled by the coefficient
    let penalty = Tensor::scalar(0.25);
    let (loss, _) = loss_d_src(&t(&[2.0]), &t(&[-1.0]), &v, Some(&penalty));
    assert!((loss.item() - (-3.0 + 10.0 * 0.25)).abs() < 1e-12);
}

#[test]
fn g_src_forms() {
    // non-saturating: p_fake = 1 -> 0 (clamped)
    let (loss, _) = loss_g_src(&t(&[1.0]), &AdversarialVariant::log_loss());
    assert!(loss.item().abs() < 1e-6);

    // saturating literal form at p = 0.5 -> ln 0.5
    let (loss, _) = loss_g_src(&t(&[0.5]), &AdversarialVariant::log_loss_saturating());
    assert!((loss.item() - 0.5f64.ln()).abs() < 1e-12);

    // wasserstein: negated mean
    let (loss, _) = loss_g_src(&t(&[3.0]), &AdversarialVariant::wasserstein(0.0));
    assert_eq!(loss.item(), -3.0);
}

fn probs_for(rows: &[[f64; 7]]) -> Tensor<f64> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, &[rows.len(), 7])
}

#[test]
fn attr_loss_closed_forms() {
    let labels = vec![AttributeVector::new(1, 0, 2).unwrap()];
    // probability 1 on every true class -> 0
    let perfect = probs_for(&[[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]]);
    let (loss, _) = loss_attr(&perfect, &labels);
    assert!(loss.item().abs() < 1e-5);

    // uniform groups -> ln 2 + ln 2 + ln 3
    let third = 1.0 / 3.0;
    let uniform = probs_for(&[[0.5, 0.5, 0.5, 0.5, third, third, third]]);
    let (loss, _) = loss_attr(&uniform, &labels);
    let expect = 2.0 * std::f64::consts::LN_2 + 3.0f64.ln();
    assert!((loss.item() - expect).abs() < 1e-12, "{} vs {expect}", loss.item());

    // batch order invariance
    let labels2 = vec![
        AttributeVector::new(1, 0, 2).unwrap(),
        AttributeVector::new(0, 1, 0).unwrap(),
    ];
    let rows = [
        [0.3, 0.7, 0.8, 0.2, 0.1, 0.2, 0.7],
        [0.6, 0.4, 0.25, 0.75, 0.5, 0.3, 0.2],
    ];
    let (a, _) = loss_attr(&probs_for(&rows), &labels2);
    let swapped = [rows[1], rows[0]];
    let labels_swapped = vec![labels2[1], labels2[0]];
    let (b, _) = loss_attr(&probs_for(&swapped), &labels_swapped);
    assert!((a.item() - b.item()).abs() < 1e-12);
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn rows(rows: &[Vec<f64>]) -> Tensor<f64> {
    let d = rows[0].len();
    Tensor::from_vec(rows.iter().flatten().copied().collect(), &[rows.len(), d])
}

#[test]
fn match_loss_closed_forms_and_identity() {
    let a = rows(&[unit(&[1.0, 0.0, 0.0])]);
    assert!(loss_g_match(&a, &a).unwrap().item().abs() < 1e-12);

    let b = rows(&[unit(&[0.0, 1.0, 0.0])]);
    assert!((loss_g_match(&a, &b).unwrap().item() - 2.0).abs() < 1e-12);

    let anti = rows(&[vec![-1.0, 0.0, 0.0]]);
    assert!((loss_g_match(&a, &anti).unwrap().item() - 4.0).abs() < 1e-12);

    // ||a - b||^2 = 2 - 2 <a,b> on random unit pairs
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    for _ in 0..50 {
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (x, y) = (unit(&x), unit(&y));
        let dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let loss = loss_g_match(&rows(&[x]), &rows(&[y])).unwrap().item();
        assert!((loss - (2.0 - 2.0 * dot)).abs() < 1e-12);
        assert!((0.0..=4.0 + 1e-12).contains(&loss));
    }

    // non-unit inputs are a domain error
    let bad = rows(&[vec![0.5, 0.5, 0.0]]);
    assert!(loss_g_match(&a, &bad).is_err());
}

#[test]
fn rec_loss_closed_forms_and_loop_oracle() {
    let x = Tensor::<f64>::from_vec(vec![0.3; 12], &[1, 3, 2, 2]);
    assert!(loss_g_rec(&x, &x).unwrap().item().abs() < 1e-15);

    let minus = Tensor::<f64>::full(&[1, 3, 2, 2], -1.0);
    let plus = Tensor::<f64>::full(&[1, 3, 2, 2], 1.0);
    assert!((loss_g_rec(&minus, &plus).unwrap().item() - 2.0).abs() < 1e-15);

    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let oracle: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / 48.0;
    let loss = loss_g_rec(
        &Tensor::from_vec(a, &[2, 3, 2, 4]),
        &Tensor::from_vec(b, &[2, 3, 2, 4]),
    )
    .unwrap()
    .item();
    assert!((loss - oracle).abs() < 1e-9);

    let other = Tensor::<f64>::zeros(&[1, 3, 2, 4]);
    assert!(loss_g_rec(&x, &other).is_err(), "shape mismatch must error");
}

#[test]
fn totals_weighted_sums() {
    let one = Tensor::<f64>::scalar(1.0);
    let w = LossWeights::default();
    let d_total = total_d_loss(
        &DLossParts { d_src: one.clone(), d_attr: one.clone() },
        &w,
    )
    .unwrap();
    assert_eq!(d_total.item(), 2.0);

    let g_total = total_g_loss(
        &GLossParts {
            g_src: one.clone(),
            g_attr: one.clone(),
            g_match: Some(one.clone()),
            g_rec: one.clone(),
        },
        &w,
    )
    .unwrap();
    assert_eq!(g_total.item(), 13.0);

    // lambda_m = 0: total independent of the matching term (baseline-GAN)
    let ablation = LossWeights { lambda_m: 0.0, ..w };
    assert!(ablation.is_baseline_gan());
    let nan = Tensor::<f64>::scalar(f64::NAN);
    let g_total = total_g_loss(
        &GLossParts {
            g_src: one.clone(),
            g_attr: one.clone(),
            g_match: Some(nan),
            g_rec: one.clone(),
        },
        &ablation,
    )
    .unwrap();
    assert_eq!(g_total.item(), 9.0);

    // zero parts -> zero totals
    let zero = Tensor::<f64>::scalar(0.0);
    let g_zero = total_g_loss(
        &GLossParts {
            g_src: zero.clone(),
            g_attr: zero.clone(),
            g_match: Some(zero.clone()),
            g_rec: zero.clone(),
        },
        &w,
    )
    .unwrap();
    assert_eq!(g_zero.item(), 0.0);
    let d_zero = total_d_loss(&DLossParts { d_src: zero.clone(), d_attr: zero }, &w).unwrap();
    assert_eq!(d_zero.item(), 0.0);

    // non-finite part is surfaced with the term named
    let err = total_g_loss(
        &GLossParts {
            g_src: Tensor::<f64>::scalar(f64::INFINITY),
            g_attr: one.clone(),
            g_match: Some(one.clone()),
            g_rec: one,
        },
        &w,
    );
    match err {
        Err(veil_core::Error::NonFinite { term, .. }) => assert_eq!(term, "l_g_src"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn nonnegativity_except_stated_forms() {
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    for _ in 0..100 {
        let p_real = t(&[rng.gen_range(0.0..1.0)]);
        let p_fake = t(&[rng.gen_range(0.0..1.0)]);
        let (l, _) = loss_d_src(&p_real, &p_fake, &AdversarialVariant::log_loss(), None);
        assert!(l.item() >= 0.0);
        let (l, _) = loss_g_src(&p_fake, &AdversarialVariant::log_loss());
        assert!(l.item() >= 0.0);
        // saturating form is nonpositive by its closed form
        let (l, _) = loss_g_src(&p_fake, &AdversarialVariant::log_loss_saturating());
        assert!(l.item() <= 0.0);
    }
}
