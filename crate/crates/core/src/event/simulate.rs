//! Deterministic events from a pair of frames, for fixtures.

use super::{Event, EventStream};
use crate::error::{Error, Result};
use crate::image::{luma, ImageTensor};

/// Offset inside the log so black pixels stay finite.
pub const SIM_LOG_EPS: f64 = 1e-3;

/// Emits `floor(|Δ| / theta)` events of sign `Δ` per pixel, where `Δ` is the
/// change in log luma between the frames. A pixel's events are spaced evenly
/// over `(t_a, t_b]`; the stream is ordered by time, then row-major position.
pub fn simulate_events(
    frame_a: &ImageTensor,
    frame_b: &ImageTensor,
    t_a: u64,
    t_b: u64,
    theta: f64,
) -> Result<EventStream> {
    if !(theta > 0.0) {
        return Err(Error::invalid(format!("contrast threshold must be positive, got {theta}")));
    }
    if t_b <= t_a {
        return Err(Error::invalid(format!("simulation window needs t_b > t_a, got [{t_a}, {t_b}]")));
    }
    frame_b.tensor().expect_shape("simulate_events", frame_a.tensor().shape())?;
    let (h, w) = (frame_a.height(), frame_a.width());
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::invalid("frame too large for 16-bit event coordinates"));
    }
    let ga = luma(frame_a)?;
    let gb = luma(frame_b)?;
    let span = (t_b - t_a) as u128;
    let mut events = Vec::new();
    for (i, (&a, &b)) in ga.data().iter().zip(gb.data()).enumerate() {
        let delta = (b + SIM_LOG_EPS).ln() - (a + SIM_LOG_EPS).ln();
        let n = (delta.abs() / theta).floor() as u64;
        if n == 0 {
            continue;
        }
        let p = if delta > 0.0 { 1 } else { -1 };
        let (y, x) = ((i / w) as u16, (i % w) as u16);
        for k in 1..=n {
            let t = t_a + (k as u128 * span / n as u128) as u64;
            events.push(Event::new(t, x, y, p));
        }
    }
    events.sort_by_key(|e| e.t);
    EventStream::new(w as u16, h as u16, events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::voxelize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(10, 12, 3, |_| rng.random::<f64>() * 0.5).unwrap()
    }

    #[test]
    fn static_scene_is_silent() {
        let a = random_frame(1);
        let s = simulate_events(&a, &a, 0, 1000, 0.1).unwrap();
        assert!(s.is_empty());
        let g = voxelize(&s, 32, 0, 1000).unwrap();
        assert!(g.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_brightness_gives_one_event_per_pixel() {
        let a = random_frame(2).map_nonzero();
        let b = a.scaled(2.0);
        // the log offset makes every pixel's log ratio fall just short of ln 2
        let min_delta = a
            .data()
            .chunks(3)
            .map(|p| {
                let g = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                (2.0 * g + SIM_LOG_EPS).ln() - (g + SIM_LOG_EPS).ln()
            })
            .fold(f64::INFINITY, f64::min);
        let s = simulate_events(&a, &b, 0, 1000, min_delta * (1.0 - 1e-9)).unwrap();
        assert_eq!(s.len(), 10 * 12);
        assert!(s.events().iter().all(|e| e.p == 1 && e.t == 1000));

        let s = simulate_events(&a, &b, 0, 1000, std::f64::consts::LN_2).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn counts_match_per_pixel_oracle() {
        let a = random_frame(3);
        let b = random_frame(4);
        let theta = 0.15;
        let s = simulate_events(&a, &b, 100, 900, theta).unwrap();
        let mut counts = vec![0i64; 120];
        for e in s.events() {
            counts[e.y as usize * 12 + e.x as usize] += e.p as i64;
            assert!(e.t > 100 && e.t <= 900);
        }
        for y in 0..10 {
            for x in 0..12 {
                let gray = |img: &ImageTensor| {
                    let px = |c| img.tensor().get(&[y, x, c]);
                    0.299 * px(0) + 0.587 * px(1) + 0.114 * px(2)
                };
                let d = (gray(&b) + 1e-3).ln() - (gray(&a) + 1e-3).ln();
                let n = (d.abs() / theta).floor() as i64;
                assert_eq!(counts[y * 12 + x], n * d.signum() as i64, "pixel ({y}, {x})");
            }
        }
        assert!(s.events().windows(2).all(|w| w[0].t <= w[1].t));
    }

    #[test]
    fn rejects_bad_threshold() {
        let a = random_frame(5);
        assert!(simulate_events(&a, &a, 0, 10, 0.0).is_err());
        assert!(simulate_events(&a, &a, 0, 10, -1.0).is_err());
        assert!(simulate_events(&a, &a, 10, 10, 0.1).is_err());
    }

    trait NonZero {
        fn map_nonzero(self) -> Self;
    }

    impl NonZero for ImageTensor {
        fn map_nonzero(self) -> Self {
            ImageTensor::new(self.tensor().map(|v| v + 0.05)).unwrap()
        }
    }
}
