//! Point generation. Pure: the output depends only on the task and the
//! history, never on the order the history arrives in.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{point_name, DimKind, Dimension, HpoError, HpoTaskSpec, PointStatus, SamplerKind, TrialPoint};
use crate::model::ParamValue;

/// Round number of the next batch.
pub fn next_iteration(history: &[TrialPoint]) -> u32 {
    history.iter().map(|p| p.iteration + 1).max().unwrap_or(0)
}

fn rng_for(task: &HpoTaskSpec, iteration: u32) -> ChaCha8Rng {
    let seed = crate::ids::fnv1a64(&[&task.seed.to_string(), &iteration.to_string()]);
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(d: &Dimension, rng: &mut ChaCha8Rng) -> ParamValue {
    match &d.kind {
        DimKind::Continuous { lo, hi } => ParamValue::Float(rng.gen_range(*lo..=*hi)),
        DimKind::Integer { lo, hi } => ParamValue::Int(rng.gen_range(*lo..=*hi)),
        DimKind::Categorical { values } => values[rng.gen_range(0..values.len())].clone(),
    }
}

fn param(task: &HpoTaskSpec, name: &str) -> Option<f64> {
    task.sampler_params.get(name).copied()
}

/// Grid values of one dimension at `resolution` points per numeric axis.
fn axis(d: &Dimension, resolution: usize) -> Vec<ParamValue> {
    match &d.kind {
        DimKind::Continuous { lo, hi } => {
            if resolution == 1 {
                return vec![ParamValue::Float((lo + hi) / 2.0)];
            }
            (0..resolution)
                .map(|i| ParamValue::Float(lo + (hi - lo) * i as f64 / (resolution - 1) as f64))
                .collect()
        }
        DimKind::Integer { lo, hi } => {
            let span = (hi - lo) as u64 + 1;
            if span <= resolution as u64 {
                return (*lo..=*hi).map(ParamValue::Int).collect();
            }
            let mut out: Vec<ParamValue> = (0..resolution)
                .map(|i| {
                    let x = *lo as f64 + (hi - lo) as f64 * i as f64 / (resolution.max(2) - 1) as f64;
                    ParamValue::Int(x.round() as i64)
                })
                .collect();
            out.dedup();
            out
        }
        DimKind::Categorical { values } => values.clone(),
    }
}

/// Grid cell `index` in row-major order (last dimension fastest).
fn grid_point(axes: &[Vec<ParamValue>], dims: &[Dimension], mut index: usize) -> BTreeMap<String, ParamValue> {
    let mut out = BTreeMap::new();
    for (a, d) in axes.iter().zip(dims).rev() {
        out.insert(d.name.clone(), a[index % a.len()].clone());
        index /= a.len();
    }
    out
}

fn mutate(
    parent: &BTreeMap<String, ParamValue>,
    dims: &[Dimension],
    sigma: Option<f64>,
    p_cat: f64,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<String, ParamValue> {
    let mut out = BTreeMap::new();
    for d in dims {
        let cur = parent.get(&d.name);
        let v = match (&d.kind, cur) {
            (DimKind::Continuous { lo, hi }, Some(ParamValue::Float(x))) => {
                let s = sigma.unwrap_or(0.1 * (hi - lo));
                let step = Normal::new(0.0, s).map_or(0.0, |n| n.sample(rng));
                ParamValue::Float((x + step).clamp(*lo, *hi))
            }
            (DimKind::Integer { lo, hi }, Some(ParamValue::Int(x))) => {
                let s = sigma.unwrap_or(0.1 * (hi - lo) as f64);
                let step = Normal::new(0.0, s).map_or(0.0, |n| n.sample(rng));
                ParamValue::Int(((*x as f64 + step).round() as i64).clamp(*lo, *hi))
            }
            (DimKind::Categorical { .. }, Some(v)) if rng.gen::<f64>() >= p_cat => v.clone(),
            _ => uniform(d, rng),
        };
        out.insert(d.name.clone(), v);
    }
    out
}

/// The next round of points. Returns
/// `min(points_per_iteration, max_points - history.len())` points; an empty
/// batch once the budget is spent.
pub fn generate_points(task: &HpoTaskSpec, history: &[TrialPoint]) -> Result<Vec<TrialPoint>, HpoError> {
    task.validate()?;
    let dims = &task.space.dimensions;
    if let Some(p) = history.iter().find(|p| !task.space.contains(&p.values)) {
        return Err(HpoError::InvalidTask(format!("history point `{}` lies outside the space", p.point_id)));
    }
    let budget = (task.max_points as usize).saturating_sub(history.len());
    let n = (task.points_per_iteration as usize).min(budget);
    let iteration = next_iteration(history);
    let mut rng = rng_for(task, iteration);
    let values: Vec<BTreeMap<String, ParamValue>> = match task.sampler {
        SamplerKind::Random => (0..n)
            .map(|_| dims.iter().map(|d| (d.name.clone(), uniform(d, &mut rng))).collect())
            .collect(),
        SamplerKind::Grid => {
            let resolution = param(task, "resolution").unwrap_or(5.0).max(1.0) as usize;
            let axes: Vec<Vec<ParamValue>> = dims.iter().map(|d| axis(d, resolution)).collect();
            let cells = axes.iter().map(Vec::len).try_fold(1usize, |a, b| a.checked_mul(b));
            let cells = cells.unwrap_or(usize::MAX);
            let start = history.len();
            if n > 0 && start >= cells {
                return Err(HpoError::ExhaustedSpace);
            }
            (start..cells.min(start + n))
                .map(|i| grid_point(&axes, dims, i))
                .collect()
        }
        SamplerKind::Evolutionary => {
            let mu = param(task, "mu").unwrap_or(3.0).max(1.0) as usize;
            let sigma = param(task, "sigma");
            let p_cat = param(task, "p_categorical").unwrap_or(0.2);
            let mut scored: Vec<(f64, &TrialPoint)> = history
                .iter()
                .filter_map(|p| p.evaluated().map(|l| (l, p)))
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.point_id.cmp(&b.1.point_id)));
            let parents: Vec<&TrialPoint> = scored.into_iter().take(mu).map(|(_, p)| p).collect();
            (0..n)
                .map(|k| match parents.get(k % parents.len().max(1)) {
                    Some(p) => mutate(&p.values, dims, sigma, p_cat, &mut rng),
                    None => dims.iter().map(|d| (d.name.clone(), uniform(d, &mut rng))).collect(),
                })
                .collect()
        }
    };
    Ok(values
        .into_iter()
        .enumerate()
        .map(|(k, values)| TrialPoint {
            point_id: point_name(iteration, k),
            values,
            status: PointStatus::Generated,
            loss: None,
            iteration,
        })
        .collect())
}

/// Budget spent, or `patience` consecutive rounds without a new best.
/// A round with no evaluated point does not improve.
pub fn should_stop(task: &HpoTaskSpec, history: &[TrialPoint]) -> bool {
    if history.len() >= task.max_points as usize {
        return true;
    }
    let rounds = next_iteration(history);
    if rounds == 0 {
        return false;
    }
    let mut best_by_round: BTreeMap<u32, Option<f64>> = (0..rounds).map(|i| (i, None)).collect();
    for p in history {
        if let Some(l) = p.evaluated() {
            let b = best_by_round.entry(p.iteration).or_default();
            *b = Some(b.map_or(l, |b| b.min(l)));
        }
    }
    let mut best = f64::INFINITY;
    let mut stale = 0u32;
    for b in best_by_round.values() {
        match b {
            Some(l) if *l < best => {
                best = *l;
                stale = 0;
            }
            _ => stale += 1,
        }
    }
    stale >= task.patience
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hpo::SearchSpace;

    fn line(sampler: SamplerKind) -> HpoTaskSpec {
        HpoTaskSpec::new(
            SearchSpace::new(vec![Dimension::continuous("x", 0.0, 1.0)]),
            sampler,
            3,
            9,
        )
    }

    fn evaluate(points: Vec<TrialPoint>, f: impl Fn(&TrialPoint) -> f64) -> Vec<TrialPoint> {
        points
            .into_iter()
            .map(|mut p| {
                p.loss = Some(f(&p));
                p.status = PointStatus::Evaluated;
                p
            })
            .collect()
    }

    fn x(p: &TrialPoint) -> f64 {
        p.values["x"].as_f64().unwrap()
    }

    #[test]
    fn grid_resolution_three() {
        let t = line(SamplerKind::Grid).with_param("resolution", 3.0);
        let pts = generate_points(&t, &[]).unwrap();
        assert_eq!(pts.iter().map(x).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
        assert_eq!(generate_points(&t, &pts), Err(HpoError::ExhaustedSpace));
    }

    #[test]
    fn grid_is_row_major() {
        let mut t = line(SamplerKind::Grid).with_param("resolution", 2.0);
        t.space.dimensions.push(Dimension::categorical("c", vec!["a".into(), "b".into()]));
        t.points_per_iteration = 4;
        let pts = generate_points(&t, &[]).unwrap();
        let cells: Vec<(f64, String)> = pts
            .iter()
            .map(|p| {
                let ParamValue::Str(c) = &p.values["c"] else { panic!() };
                (x(p), c.clone())
            })
            .collect();
        assert_eq!(
            cells,
            vec![(0.0, "a".into()), (0.0, "b".into()), (1.0, "a".into()), (1.0, "b".into())]
        );
    }

    #[test]
    fn random_is_seeded_and_in_bounds() {
        let mut t = line(SamplerKind::Random);
        t.space.dimensions.push(Dimension::integer("n", -3, 3));
        let a = generate_points(&t, &[]).unwrap();
        assert_eq!(a, generate_points(&t, &[]).unwrap());
        assert!(a.iter().all(|p| t.space.contains(&p.values)));
        t.seed = 1;
        assert_ne!(a, generate_points(&t, &[]).unwrap());
    }

    #[test]
    fn budget_caps_the_batch() {
        let t = line(SamplerKind::Random);
        let mut h = Vec::new();
        for _ in 0..3 {
            h.extend(evaluate(generate_points(&t, &h).unwrap(), x));
        }
        assert_eq!(h.len(), 9);
        assert!(generate_points(&t, &h).unwrap().is_empty());
        assert!(should_stop(&t, &h));
    }

    #[test]
    fn history_order_does_not_matter() {
        let t = line(SamplerKind::Evolutionary).with_param("mu", 2.0);
        let h = evaluate(generate_points(&t, &[]).unwrap(), x);
        let mut rev = h.clone();
        rev.reverse();
        assert_eq!(generate_points(&t, &h).unwrap(), generate_points(&t, &rev).unwrap());
    }

    #[test]
    fn evolutionary_on_square_reaches_zero() {
        // Standalone oracle: f(x) = x^2 on [-5, 5], mu 2, lambda 4, sigma 0.5.
        let mut t = HpoTaskSpec::new(
            SearchSpace::new(vec![Dimension::continuous("x", -5.0, 5.0)]),
            SamplerKind::Evolutionary,
            4,
            80,
        )
        .with_param("mu", 2.0)
        .with_param("sigma", 0.5);
        for seed in 0..10 {
            t.seed = seed;
            let mut h = Vec::new();
            for _ in 0..20 {
                h.extend(evaluate(generate_points(&t, &h).unwrap(), |p| x(p) * x(p)));
            }
            let best = h.iter().map(|p| x(p).abs()).fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "seed {seed}: {best}");
        }
    }

    #[test]
    fn patience_counts_stale_rounds() {
        let mut t = line(SamplerKind::Random);
        t.max_points = 100;
        t.patience = 0;
        let h = evaluate(generate_points(&t, &[]).unwrap(), x);
        assert!(should_stop(&t, &h));
        t.patience = 1;
        assert!(!should_stop(&t, &h));
        // A second round that never beats the first.
        let worse = evaluate(generate_points(&t, &h).unwrap(), |_| 10.0);
        let mut h2 = h.clone();
        h2.extend(worse);
        assert!(should_stop(&t, &h2));
        assert!(!should_stop(&t, &[]));
    }

    #[test]
    fn lost_rounds_do_not_improve() {
        let mut t = line(SamplerKind::Random);
        t.patience = 1;
        let lost: Vec<TrialPoint> = generate_points(&t, &[])
            .unwrap()
            .into_iter()
            .map(|mut p| {
                p.status = PointStatus::Lost;
                p
            })
            .collect();
        assert!(should_stop(&t, &lost));
    }

    #[test]
    fn invalid_spaces_rejected() {
        let mut t = line(SamplerKind::Random);
        t.space.dimensions.push(Dimension::continuous("y", 1.0, 1.0));
        assert!(t.validate().is_err());
        let mut t = line(SamplerKind::Random);
        t.space.dimensions.push(Dimension::categorical("c", vec!["a".into(), "a".into()]));
        assert!(t.validate().is_err());
        let mut t = line(SamplerKind::Random);
        t.points_per_iteration = 10;
        assert!(t.validate().is_err());
    }
}
