//! Sample-frequency bias of asynchronous collection.
//!
//! A worker holds each sampled action for a time-share lease: it keeps
//! re-running the action until the lease expires, then draws again. Over a
//! window `T` an action therefore occupies a `pi(a)` share of worker time and
//! completes about `pi(a) T / dt_a` times, so fast actions are over-counted by
//! the inverse of their duration. A zero lease is plain resampling after
//! every completion.

use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Draws an index from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|p| *p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Per-worker lease state, holding any choice `T`.
#[derive(Debug, Clone)]
pub struct LeasedSampler<T = usize> {
    lease: f64,
    current: Option<(T, f64)>,
}

impl<T: Clone> LeasedSampler<T> {
    pub fn new(lease_s: f64) -> Self {
        Self {
            lease: lease_s.max(0.0),
            current: None,
        }
    }

    /// Action to run next at time `now` (seconds); `draw` is called only when
    /// the lease has expired.
    pub fn next(&mut self, now: f64, draw: impl FnOnce() -> T) -> T {
        match &self.current {
            Some((a, start)) if now - start < self.lease => a.clone(),
            _ => {
                let a = draw();
                self.current = Some((a.clone(), now));
                a
            }
        }
    }

    /// Forces a fresh draw on the next call.
    pub fn reset(&mut self) {
        self.current = None;
    }
}

/// Expected completions per action: `pi(a) * T * workers / dt_a`.
pub fn frequency_law(probs: &[f64], durations: &[f64], window: f64, workers: usize) -> Vec<f64> {
    probs
        .iter()
        .zip(durations)
        .map(|(p, d)| p * window * workers as f64 / d)
        .collect()
}

/// Discrete-event version of [`sample_frequency_experiment`]: counts
/// completions per action inside `[0, window]`.
pub fn simulate_frequency_virtual(
    probs: &[f64],
    durations: &[f64],
    window: f64,
    workers: usize,
    lease: f64,
    seed: u64,
) -> Vec<usize> {
    let mut counts = vec![0; probs.len()];
    for w in 0..workers {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(w as u64));
        let mut sampler = LeasedSampler::new(lease);
        let mut t = 0.0;
        loop {
            let a = sampler.next(t, || sample_categorical(probs, &mut rng));
            t += durations[a];
            if t > window {
                break;
            }
            counts[a] += 1;
        }
    }
    counts
}

/// Real-time experiment: `workers` threads each sleep for the duration of
/// the action they run, continuously, for `window` seconds of wall clock.
pub fn sample_frequency_experiment(
    probs: &[f64],
    durations: &[f64],
    window: f64,
    workers: usize,
    lease: f64,
    seed: u64,
) -> Vec<usize> {
    let start = Instant::now();
    let end = start + Duration::from_secs_f64(window);
    let handles: Vec<_> = (0..workers)
        .map(|w| {
            let probs = probs.to_vec();
            let durations = durations.to_vec();
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(w as u64));
                let mut sampler = LeasedSampler::new(lease);
                let mut counts = vec![0usize; probs.len()];
                loop {
                    let now = start.elapsed().as_secs_f64();
                    let a = sampler.next(now, || sample_categorical(&probs, &mut rng));
                    let finish = Instant::now() + Duration::from_secs_f64(durations[a]);
                    if finish > end {
                        break;
                    }
                    thread::sleep(finish.saturating_duration_since(Instant::now()));
                    counts[a] += 1;
                }
                counts
            })
        })
        .collect();
    let mut total = vec![0; probs.len()];
    for h in handles {
        for (t, c) in total.iter_mut().zip(h.join().expect("worker")) {
            *t += c;
        }
    }
    total
}

/// Launch indices of the first `keep` completions when `durations.len()`
/// jobs are started in launch order on `workers` workers.
pub fn simulate_batch_virtual(durations: &[f64], workers: usize, keep: usize) -> Vec<usize> {
    let mut free = vec![0.0f64; workers.max(1)];
    let mut done: Vec<(f64, usize)> = Vec::with_capacity(durations.len());
    for (i, d) in durations.iter().enumerate() {
        let (w, t) = free
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("workers");
        free[w] = t + d;
        done.push((t + d, i));
    }
    done.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    done.into_iter().take(keep).map(|x| x.1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lease_holds_action() {
        let mut s = LeasedSampler::new(1.0);
        let mut n = 0;
        let mut draw = || {
            n += 1;
            n
        };
        assert_eq!(s.next(0.0, &mut draw), 1);
        assert_eq!(s.next(0.5, &mut draw), 1);
        assert_eq!(s.next(1.0, &mut draw), 2);
        let mut z = LeasedSampler::new(0.0);
        assert_eq!(z.next(0.0, || 7), 7);
        assert_eq!(z.next(0.0, || 8), 8);
    }

    #[test]
    fn virtual_ratio_matches_law() {
        // pi = (0.5, 0.5), dt = (1, 4), T = 400, one worker, averaged over
        // independent replicates.
        let (mut fast, mut slow) = (0usize, 0usize);
        for seed in 0..200 {
            let c =
                simulate_frequency_virtual(&[0.5, 0.5], &[1.0, 4.0], 400.0, 1, 4.0, seed * 7919);
            fast += c[0];
            slow += c[1];
        }
        let ratio = fast as f64 / slow as f64;
        assert!((ratio - 4.0).abs() / 4.0 < 0.10, "ratio {ratio}");
        let law = frequency_law(&[0.5, 0.5], &[1.0, 4.0], 400.0, 1);
        assert!((law[0] / law[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_policy_and_equal_durations() {
        let c = simulate_frequency_virtual(&[1.0, 0.0], &[1.0, 4.0], 100.0, 3, 4.0, 1);
        assert_eq!(c[1], 0);
        assert!(c[0] > 0);
        let c = simulate_frequency_virtual(&[0.25, 0.75], &[1.0, 1.0], 200.0, 50, 0.0, 2);
        let n = (c[0] + c[1]) as f64;
        let p = c[0] as f64 / n;
        let sd = (0.25 * 0.75 / n).sqrt();
        assert!((p - 0.25).abs() < 3.0 * sd);
    }

    #[test]
    fn batch_simulation_keeps_fast() {
        assert_eq!(
            simulate_batch_virtual(&[0.1, 0.1, 5.0, 5.0], 4, 2),
            vec![0, 1]
        );
        let mut fast = 0;
        let mut total = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            // m = 2, B = 8: 16 launches, half of each class, random order.
            let mut d: Vec<f64> = (0..16)
                .map(|i| if i % 2 == 0 { 0.05 } else { 0.5 })
                .collect();
            for i in (1..d.len()).rev() {
                let j = rng.gen_range(0..=i);
                d.swap(i, j);
            }
            for i in simulate_batch_virtual(&d, 16, 8) {
                total += 1;
                fast += (d[i] < 0.1) as usize;
            }
        }
        assert!(fast as f64 / total as f64 > 0.9);
    }
}
