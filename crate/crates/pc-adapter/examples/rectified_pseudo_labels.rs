//! Beta-guided confidence rectification in isolation: fits per-class beta
//! distributions to simulated source confidences, then shows how
//! rectification re-orders prediction scores and moves the effective
//! selection threshold per class.

use pc_adapter::pseudolabel::{
    beta_cdf, fit_beta_mom, max_confidence_pl, rectify, rescaled_threshold, select_pseudo_label,
    BetaParams, MAXCONF_GAMMA,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Inverse-CDF sampling via bisection; good enough for a demo.
fn sample_beta(params: &BetaParams, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if beta_cdf(mid, params).unwrap() < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn main() -> pc_adapter::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // class 0: the model is confident on its examples (Beta(8,2) shape);
    // class 1: systematically low confidence (Beta(2,8) shape)
    let true_params = [BetaParams::new(8.0, 2.0), BetaParams::new(2.0, 8.0)];
    let fitted: Vec<BetaParams> = true_params
        .iter()
        .map(|p| {
            let samples: Vec<f64> = (0..2000).map(|_| sample_beta(p, &mut rng)).collect();
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                / (samples.len() - 1) as f64;
            fit_beta_mom(mean, var)
        })
        .collect();
    for (t, p) in fitted.iter().enumerate() {
        println!(
            "class {t}: fitted alpha {:.2} beta {:.2} (mean confidence {:.3})",
            p.alpha,
            p.beta,
            p.mean()
        );
    }

    // a prediction that slightly favors the high-confidence class: 0.52 is an
    // unremarkable score for class 0 but exceptional for class 1
    let probs = [0.52, 0.48];
    let r0 = 5.0;
    let adjusted = rectify(&probs, &fitted, r0)?;
    println!();
    println!("raw probs      {probs:?}");
    println!(
        "rectified      [{:.4}, {:.4}]  (argmax flips to class 1)",
        adjusted[0], adjusted[1]
    );

    // at 0.52/0.48 both selectors abstain; a solid class-1 prediction is
    // adopted by the rectified selector but rejected by the raw baseline
    let gamma = 0.8;
    let strong = [0.25, 0.75];
    let strong_adjusted = rectify(&strong, &fitted, r0)?;
    println!();
    println!(
        "weak {probs:?}: rectified pick {:?}, maxconf pick {:?}",
        select_pseudo_label(&adjusted, gamma, r0),
        max_confidence_pl(&probs, MAXCONF_GAMMA)
    );
    println!(
        "strong {strong:?}: rectified pick {:?}, maxconf pick {:?}",
        select_pseudo_label(&strong_adjusted, gamma, r0),
        max_confidence_pl(&strong, MAXCONF_GAMMA)
    );

    // the rescaled threshold shows the band of raw confidences that can pass:
    // a score at percentile r needs raw confidence >= gamma' * (1 - r + r0)
    let g = rescaled_threshold(gamma, r0);
    println!();
    println!(
        "effective raw threshold: {:.3} at percentile 1.0, {:.3} at percentile 0.0",
        g * r0,
        g * (1.0 + r0)
    );
    Ok(())
}
