use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Dataset};

const CENTER_TRIES: usize = 1000;
const RESTARTS: usize = 20;

/// Unit-variance Gaussian clusters around seeded centers, laid out as `[1, 1, dims]` images.
///
/// Centers are drawn uniformly from the cube `[-R, R]^dims` with
/// `R = 5 * classes^(1/dims)` (in units of the cluster standard deviation)
/// and rejected until every pair is at least `separation` apart. The whole
/// set is then mapped affinely onto `[0, 1]`, which preserves the geometry up
/// to a common scale.
pub fn synth_blobs(
    classes: usize,
    dims: usize,
    samples_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes == 0 || dims == 0 || samples_per_class == 0 {
        return Err(DataError::InvalidBlobs(
            "classes, dims and samples_per_class must be >= 1".into(),
        ));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(DataError::InvalidBlobs(format!(
            "separation must be > 0, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = 5.0 * (classes as f64).powf(1.0 / dims as f64);
    let centers = place_centers(&mut rng, classes, dims, radius, separation).ok_or(
        DataError::InfeasibleSeparation {
            classes,
            dims,
            separation,
        },
    )?;

    let n = classes * samples_per_class;
    let mut values = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..samples_per_class {
        for (class, center) in centers.iter().enumerate() {
            for c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(c + z);
            }
            labels.push(class);
        }
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let images = values.iter().map(|v| ((v - lo) / span) as f32).collect();
    Dataset::new(
        vec![1, 1, dims],
        images,
        labels,
        classes,
        format!("blobs(classes={classes}, dims={dims}, n={samples_per_class}, sep={separation}, seed={seed})"),
    )
}

fn place_centers(
    rng: &mut ChaCha8Rng,
    classes: usize,
    dims: usize,
    radius: f64,
    separation: f64,
) -> Option<Vec<Vec<f64>>> {
    'restart: for _ in 0..RESTARTS {
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
        while centers.len() < classes {
            let placed = (0..CENTER_TRIES).find_map(|_| {
                let c: Vec<f64> = (0..dims)
                    .map(|_| rng.random_range(-radius..=radius))
                    .collect();
                let ok = centers.iter().all(|o| {
                    o.iter()
                        .zip(&c)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                        >= separation
                });
                ok.then_some(c)
            });
            match placed {
                Some(c) => centers.push(c),
                None => continue 'restart,
            }
        }
        return Some(centers);
    }
    None
}
