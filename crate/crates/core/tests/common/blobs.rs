use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wttf_core::data::Point2;

/// `per` points around each centre, interleaved; returns points and true labels.
pub fn blobs(centers: &[Point2], per: usize, sd: f64, seed: u64) -> (Vec<Point2>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sd).unwrap();
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for _ in 0..per {
        for (k, c) in centers.iter().enumerate() {
            pts.push(Point2::new(c.x + n.sample(&mut rng), c.y + n.sample(&mut rng)));
            truth.push(k);
        }
    }
    (pts, truth)
}

pub fn square() -> Vec<Point2> {
    vec![
        Point2::new(-20.0, -20.0),
        Point2::new(20.0, -20.0),
        Point2::new(20.0, 20.0),
        Point2::new(-20.0, 20.0),
    ]
}

