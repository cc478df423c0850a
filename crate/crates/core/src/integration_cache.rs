//! Memoized partial integrations keyed by IMU read-out time.
//!
//! Every window frame owns an [`AnchorCache`] with two ordered trees: the
//! forward tree maps a read-out time `t_i ≥ t_k` to the delta `t_k → t_i`, the
//! backward tree maps `t_i ≤ t_k` to the backward delta `t_k → t_i`. A query for
//! `t̃` takes the stored entry nearest to `t̃` on the anchor side, extends it one
//! IMU interval at a time (storing each intermediate result), and finishes
//! with one fresh sub-interval step. Since deltas are folds over identical
//! steps, cached results are bit-identical to direct integration.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::preintegration::{
    bias_correct, bias_distance, check_monotonic, end_rates, EndRates, ImuSample, Integrator,
    NoiseParams, PreintegrationDelta, TailStep,
};

/// Seconds with a total order, for use as a tree key.
#[derive(Debug, Clone, Copy)]
pub struct TimeKey(pub f64);

impl PartialEq for TimeKey {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0) == Ordering::Equal
    }
}

impl Eq for TimeKey {}

impl PartialOrd for TimeKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TimeKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    /// Queries served without extending a tree.
    pub hits: u64,
    /// Queries that extended an existing entry.
    pub partial_hits: u64,
    /// Queries that had to integrate from the anchor.
    pub misses: u64,
    /// Whole-interval steps performed while extending trees.
    pub integration_steps: u64,
    /// Fresh sub-interval steps at the query end.
    pub tail_steps: u64,
}

impl CacheStats {
    fn add(&mut self, other: &CacheStats) {
        self.hits += other.hits;
        self.partial_hits += other.partial_hits;
        self.misses += other.misses;
        self.integration_steps += other.integration_steps;
        self.tail_steps += other.tail_steps;
    }
}

/// Result of a cached integration: the delta at the cache's linearization
/// bias, plus the pieces needed for end-time derivatives.
#[derive(Debug, Clone, Copy)]
pub struct CachedDelta {
    pub delta: PreintegrationDelta,
    pub prefix: PreintegrationDelta,
    pub tail: TailStep,
}

#[derive(Debug, Clone)]
pub struct AnchorCache {
    anchor_time: f64,
    bias_accel: Vec3,
    bias_gyro: Vec3,
    forward: BTreeMap<TimeKey, PreintegrationDelta>,
    backward: BTreeMap<TimeKey, PreintegrationDelta>,
    capacity: usize,
    stats: CacheStats,
}

impl AnchorCache {
    pub fn new(anchor_time: f64, bias_accel: Vec3, bias_gyro: Vec3, capacity: usize) -> Self {
        Self {
            anchor_time,
            bias_accel,
            bias_gyro,
            forward: BTreeMap::new(),
            backward: BTreeMap::new(),
            capacity: capacity.max(1),
            stats: CacheStats::default(),
        }
    }

    pub fn anchor_time(&self) -> f64 {
        self.anchor_time
    }

    pub fn linearization_bias(&self) -> (Vec3, Vec3) {
        (self.bias_accel, self.bias_gyro)
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.forward.len() + self.backward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Forward keys in increasing order.
    pub fn forward_keys(&self) -> impl Iterator<Item = f64> + '_ {
        self.forward.keys().map(|k| k.0)
    }

    /// Backward keys in increasing order.
    pub fn backward_keys(&self) -> impl Iterator<Item = f64> + '_ {
        self.backward.keys().map(|k| k.0)
    }

    /// Greatest forward entry with key `≤ t`.
    pub fn query_floor(&self, t: f64) -> Option<(f64, &PreintegrationDelta)> {
        self.forward
            .range(..=TimeKey(t))
            .next_back()
            .map(|(k, d)| (k.0, d))
    }

    /// Smallest backward entry with key `≥ t`.
    pub fn query_ceil(&self, t: f64) -> Option<(f64, &PreintegrationDelta)> {
        self.backward.range(TimeKey(t)..).next().map(|(k, d)| (k.0, d))
    }

    /// Drops all entries, keeping the counters and linearization bias.
    pub fn clear_entries(&mut self) {
        self.forward.clear();
        self.backward.clear();
    }

    /// Clears all entries and relinearizes at the given biases.
    pub fn rebuild(&mut self, bias_accel: Vec3, bias_gyro: Vec3) {
        self.forward.clear();
        self.backward.clear();
        self.bias_accel = bias_accel;
        self.bias_gyro = bias_gyro;
        self.stats = CacheStats::default();
    }

    /// Integrates `anchor → t_target` at the cache's linearization bias.
    pub fn integrate(
        &mut self,
        samples: &[ImuSample],
        noise: &NoiseParams,
        t_target: f64,
    ) -> Result<CachedDelta> {
        let integrator = Integrator::new(samples, self.bias_accel, self.bias_gyro, *noise);
        integrator.check_coverage(self.anchor_time, t_target)?;
        let forward = t_target >= self.anchor_time;

        let seed = if forward {
            self.query_floor(t_target)
        } else {
            self.query_ceil(t_target)
        }
        .map(|(k, d)| (k, *d));
        let (mut prev, mut delta) = seed.unwrap_or((self.anchor_time, integrator.identity()));

        // Read-out times strictly past the seed and up to the target.
        let mut knots = integrator.interior_knots(prev, t_target);
        let target_is_sample = if forward {
            integrator
                .floor_index(t_target)
                .is_some_and(|i| samples[i].timestamp == t_target && t_target > prev)
        } else {
            integrator
                .ceil_index(t_target)
                .is_some_and(|i| samples[i].timestamp == t_target && t_target < prev)
        };
        if target_is_sample {
            knots.push(t_target);
        }
        let tree = if forward {
            &mut self.forward
        } else {
            &mut self.backward
        };
        for &knot in &knots {
            delta = delta.compose(&integrator.step(prev, knot));
            delta.dt = knot - self.anchor_time;
            tree.insert(TimeKey(knot), delta);
            prev = knot;
        }
        let extended = knots.len() as u64;

        match (seed.is_some(), extended > 0) {
            (_, false) => self.stats.hits += 1,
            (true, true) => self.stats.partial_hits += 1,
            (false, true) => self.stats.misses += 1,
        }
        self.stats.integration_steps += extended;

        let prefix = delta;
        let tail = integrator.tail(prev, t_target);
        if t_target != prev {
            delta = delta.compose(&integrator.step(prev, t_target));
            self.stats.tail_steps += 1;
        }
        delta.dt = t_target - self.anchor_time;
        self.enforce_capacity();
        Ok(CachedDelta {
            delta,
            prefix,
            tail,
        })
    }

    fn enforce_capacity(&mut self) {
        while self.forward.len() > self.capacity {
            self.forward.pop_last();
        }
        while self.backward.len() > self.capacity {
            self.backward.pop_first();
        }
    }
}

/// Delta plus end-time derivatives at the requested biases.
#[derive(Debug, Clone, Copy)]
pub struct OffsetIntegration {
    pub delta: PreintegrationDelta,
    pub rates: EndRates,
}

/// The IMU buffer together with one [`AnchorCache`] per window frame.
#[derive(Debug, Clone)]
pub struct CacheBank {
    samples: Vec<ImuSample>,
    caches: BTreeMap<TimeKey, AnchorCache>,
    noise: NoiseParams,
    bias_bound: f64,
    capacity: usize,
    retired: CacheStats,
    caching: bool,
}

impl CacheBank {
    /// `capacity` bounds the entries kept per direction and per frame.
    pub fn new(noise: NoiseParams, bias_bound: f64, capacity: usize) -> Self {
        Self {
            samples: Vec::new(),
            caches: BTreeMap::new(),
            noise,
            bias_bound,
            capacity,
            retired: CacheStats::default(),
            caching: true,
        }
    }

    /// Capacity covering `max_offset` on either side of a frame.
    pub fn capacity_for(max_offset: f64, imu_period: f64) -> usize {
        (2.0 * max_offset / imu_period).ceil() as usize + 2
    }

    pub fn with_samples(mut self, samples: Vec<ImuSample>) -> Result<Self> {
        self.extend_samples(&samples)?;
        Ok(self)
    }

    /// Appends samples; existing samples and cache entries stay valid.
    pub fn extend_samples(&mut self, samples: &[ImuSample]) -> Result<()> {
        check_monotonic(samples)?;
        if let (Some(last), Some(first)) = (self.samples.last(), samples.first()) {
            if !(first.timestamp > last.timestamp) {
                return Err(Error::NonMonotonicTimestamps {
                    index: self.samples.len(),
                });
            }
        }
        self.samples.extend_from_slice(samples);
        Ok(())
    }

    pub fn samples(&self) -> &[ImuSample] {
        &self.samples
    }

    /// With caching off every query integrates from the anchor, which gives
    /// bit-identical deltas and counts the full naive work.
    pub fn set_caching(&mut self, enabled: bool) {
        self.caching = enabled;
    }

    pub fn caching(&self) -> bool {
        self.caching
    }

    pub fn noise(&self) -> &NoiseParams {
        &self.noise
    }

    pub fn bias_bound(&self) -> f64 {
        self.bias_bound
    }

    /// Registers a frame; an existing cache for `t_k` is kept.
    pub fn insert_frame(&mut self, t_k: f64, bias_accel: Vec3, bias_gyro: Vec3) {
        let capacity = self.capacity;
        self.caches
            .entry(TimeKey(t_k))
            .or_insert_with(|| AnchorCache::new(t_k, bias_accel, bias_gyro, capacity));
    }

    pub fn contains(&self, t_k: f64) -> bool {
        self.caches.contains_key(&TimeKey(t_k))
    }

    pub fn cache(&self, t_k: f64) -> Option<&AnchorCache> {
        self.caches.get(&TimeKey(t_k))
    }

    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }

    pub fn rebuild(&mut self, t_k: f64, bias_accel: Vec3, bias_gyro: Vec3) {
        if let Some(c) = self.caches.get_mut(&TimeKey(t_k)) {
            self.retired.add(&c.stats);
            c.rebuild(bias_accel, bias_gyro);
        }
    }

    pub fn evict_frame(&mut self, t_k: f64) {
        if let Some(c) = self.caches.remove(&TimeKey(t_k)) {
            self.retired.add(&c.stats);
        }
    }

    /// Counters summed over live caches and everything evicted or rebuilt.
    pub fn total_stats(&self) -> CacheStats {
        let mut s = self.retired;
        for c in self.caches.values() {
            s.add(&c.stats);
        }
        s
    }

    /// Cached `t_k → t_target` at the cache's linearization bias. Fails with
    /// `StaleBias` when the given biases have drifted past the bound.
    pub fn query(
        &mut self,
        t_k: f64,
        t_target: f64,
        bias_accel: &Vec3,
        bias_gyro: &Vec3,
    ) -> Result<CachedDelta> {
        let cache = self
            .caches
            .get_mut(&TimeKey(t_k))
            .ok_or(Error::UnknownFrame(t_k))?;
        let lin = PreintegrationDelta::identity(cache.bias_accel, cache.bias_gyro);
        let distance = bias_distance(&lin, bias_accel, bias_gyro);
        if distance > self.bias_bound {
            return Err(Error::StaleBias {
                distance,
                bound: self.bias_bound,
            });
        }
        if !self.caching {
            cache.clear_entries();
        }
        cache.integrate(&self.samples, &self.noise, t_target)
    }

    /// Cached `t_k → t_target`, bias-corrected to the given biases.
    pub fn integrate_cached(
        &mut self,
        t_k: f64,
        t_target: f64,
        bias_accel: &Vec3,
        bias_gyro: &Vec3,
    ) -> Result<PreintegrationDelta> {
        let c = self.query(t_k, t_target, bias_accel, bias_gyro)?;
        bias_correct(&c.delta, bias_accel, bias_gyro, self.bias_bound)
    }

    /// Like [`integrate_cached`](Self::integrate_cached), rebuilding a stale
    /// cache first, and also returning end-time derivatives.
    pub fn integrate_with_rates(
        &mut self,
        t_k: f64,
        t_target: f64,
        bias_accel: &Vec3,
        bias_gyro: &Vec3,
    ) -> Result<OffsetIntegration> {
        let c = match self.query(t_k, t_target, bias_accel, bias_gyro) {
            Err(Error::StaleBias { .. }) => {
                self.rebuild(t_k, *bias_accel, *bias_gyro);
                self.query(t_k, t_target, bias_accel, bias_gyro)?
            }
            other => other?,
        };
        let delta = bias_correct(&c.delta, bias_accel, bias_gyro, self.bias_bound)?;
        let prefix = bias_correct(&c.prefix, bias_accel, bias_gyro, self.bias_bound)?;
        let (lin_a, lin_g) = (c.delta.linearization_bias_accel, c.delta.linearization_bias_gyro);
        let tail = TailStep {
            gyro_start: c.tail.gyro_start + lin_g - bias_gyro,
            accel_start: c.tail.accel_start + lin_a - bias_accel,
            ..c.tail
        };
        Ok(OffsetIntegration {
            delta,
            rates: end_rates(&prefix, &tail),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::log_so3;
    use crate::preintegration::integrate_delta;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn samples(t0: f64, t1: f64, rate: f64) -> Vec<ImuSample> {
        let n = ((t1 - t0) * rate).round() as usize;
        (0..=n)
            .map(|i| {
                let t = t0 + i as f64 / rate;
                ImuSample {
                    timestamp: t,
                    gyro: Vec3::new(0.5 * (1.3 * t).sin(), -0.4 * t.cos(), 0.2 + 0.1 * t),
                    accel: Vec3::new((2.0 * t).sin(), 0.3, 9.8 + 0.5 * t.cos()),
                }
            })
            .collect()
    }

    fn bank(s: Vec<ImuSample>) -> CacheBank {
        CacheBank::new(NoiseParams::default(), 0.1, 1000).with_samples(s).unwrap()
    }

    fn assert_same(a: &PreintegrationDelta, b: &PreintegrationDelta, tol: f64) {
        assert!((a.alpha - b.alpha).norm() <= tol, "alpha {}", (a.alpha - b.alpha).norm());
        assert!((a.beta - b.beta).norm() <= tol, "beta {}", (a.beta - b.beta).norm());
        assert!(log_so3(&(a.dq.inverse() * b.dq)).norm() <= tol);
        assert!((a.covariance - b.covariance).norm() <= tol);
        assert!((a.bias_jacobian() - b.bias_jacobian()).norm() <= tol);
        assert!((a.dt - b.dt).abs() <= 1e-12);
    }

    #[test]
    fn floor_query_semantics() {
        let s = vec![
            ImuSample { timestamp: 0.95, gyro: Vec3::zeros(), accel: Vec3::zeros() },
            ImuSample { timestamp: 1.0, gyro: Vec3::zeros(), accel: Vec3::zeros() },
            ImuSample { timestamp: 1.05, gyro: Vec3::zeros(), accel: Vec3::zeros() },
            ImuSample { timestamp: 1.10, gyro: Vec3::zeros(), accel: Vec3::zeros() },
            ImuSample { timestamp: 1.15, gyro: Vec3::zeros(), accel: Vec3::zeros() },
        ];
        let mut cache = AnchorCache::new(0.97, Vec3::zeros(), Vec3::zeros(), 100);
        assert!(cache.query_floor(1.07).is_none());
        cache.integrate(&s, &NoiseParams::default(), 1.05).unwrap();
        assert_eq!(cache.forward_keys().collect::<Vec<_>>(), vec![1.0, 1.05]);
        assert_eq!(cache.query_floor(1.05).unwrap().0, 1.05);
        cache.integrate(&s, &NoiseParams::default(), 1.12).unwrap();
        assert_eq!(cache.query_floor(1.07).unwrap().0, 1.05);
        for (k, d) in cache.forward.iter() {
            assert!((d.dt - (k.0 - 0.97)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_at_anchor_and_memoization() {
        let mut b = bank(samples(0.0, 2.0, 200.0));
        let z = Vec3::zeros();
        b.insert_frame(1.0025, z, z);
        let d = b.integrate_cached(1.0025, 1.0025, &z, &z).unwrap();
        assert_eq!(d.alpha, Vec3::zeros());
        assert!(b.cache(1.0025).unwrap().is_empty());

        b.integrate_cached(1.0025, 1.0333, &z, &z).unwrap();
        let before = b.cache(1.0025).unwrap().stats();
        b.integrate_cached(1.0025, 1.0333, &z, &z).unwrap();
        let after = b.cache(1.0025).unwrap().stats();
        assert_eq!(after.integration_steps, before.integration_steps);
        assert_eq!(after.hits, before.hits + 1);
    }

    #[test]
    fn sweep_amortizes_and_matches_naive() {
        let s = samples(0.0, 2.0, 200.0);
        let mut b = bank(s.clone());
        let z = Vec3::zeros();
        let t_k = 1.0;
        b.insert_frame(t_k, z, z);
        let n = NoiseParams::default();
        let mut naive_steps = 0;
        for i in 0..50 {
            let t = t_k + 0.0007 + 0.001 * i as f64;
            let c = b.integrate_cached(t_k, t, &z, &z).unwrap();
            let naive = integrate_delta(&s, &z, &z, t_k, t, &n).unwrap();
            assert_same(&c, &naive, 1e-9);
            naive_steps += s.iter().filter(|x| x.timestamp > t_k && x.timestamp <= t).count();
        }
        let stats = b.cache(t_k).unwrap().stats();
        let spanned = s
            .iter()
            .filter(|x| x.timestamp > t_k && x.timestamp <= t_k + 0.0497)
            .count() as u64;
        assert!(stats.integration_steps <= spanned);
        assert!(naive_steps as u64 > 20 * stats.integration_steps);
    }

    #[test]
    fn disabled_caching_is_bit_identical() {
        let s = samples(0.0, 2.0, 200.0);
        let n = NoiseParams::default();
        let z = Vec3::zeros();
        let mut on = CacheBank::new(n, 0.05, 200).with_samples(s.clone()).unwrap();
        let mut off = on.clone();
        off.set_caching(false);
        on.insert_frame(0.5, z, z);
        off.insert_frame(0.5, z, z);
        for i in 0..40 {
            let t = 0.55 + 0.0011 * i as f64;
            let a = on.integrate_cached(0.5, t, &z, &z).unwrap();
            let b = off.integrate_cached(0.5, t, &z, &z).unwrap();
            assert_eq!(a, b);
        }
        assert!(off.total_stats().integration_steps > 5 * on.total_stats().integration_steps);
    }

    #[test]
    fn random_interleavings_match_naive() {
        let s = samples(0.0, 3.0, 200.0);
        let n = NoiseParams::default();
        let mut b = bank(s.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let anchors: Vec<f64> = (0..10).map(|i| 0.5 + 0.2 * i as f64 + 0.0013 * i as f64).collect();
        let ba = Vec3::new(0.01, 0.02, -0.01);
        let bg = Vec3::new(-0.002, 0.001, 0.003);
        for &t in &anchors {
            b.insert_frame(t, ba, bg);
        }
        for _ in 0..1000 {
            let t_k = anchors[rng.random_range(0..anchors.len())];
            let target = t_k + rng.random_range(-0.2..0.2);
            let c = b.integrate_cached(t_k, target, &ba, &bg).unwrap();
            let naive = integrate_delta(&s, &ba, &bg, t_k, target, &n).unwrap();
            assert_same(&c, &naive, 1e-9);
        }
        for &t in &anchors {
            let c = b.cache(t).unwrap();
            let keys: Vec<f64> = c.forward_keys().collect();
            assert!(keys.windows(2).all(|w| w[0] < w[1]));
            assert!(keys.iter().all(|k| *k >= t && s.iter().any(|x| x.timestamp == *k)));
            assert!(c.backward_keys().all(|k| k <= t));
        }
    }

    #[test]
    fn exact_bitwise_equivalence() {
        let s = samples(0.0, 1.0, 200.0);
        let n = NoiseParams::default();
        let z = Vec3::zeros();
        let mut b = bank(s.clone());
        b.insert_frame(0.5, z, z);
        for &t in &[0.53, 0.517, 0.56, 0.45, 0.44, 0.4711, s[120].timestamp, s[80].timestamp] {
            let c = b.integrate_cached(0.5, t, &z, &z).unwrap();
            let naive = integrate_delta(&s, &z, &z, 0.5, t, &n).unwrap();
            assert_eq!(c, naive, "target {t}");
        }
    }

    #[test]
    fn stale_bias_and_rebuild() {
        let s = samples(0.0, 1.0, 200.0);
        let n = NoiseParams::default();
        let z = Vec3::zeros();
        let mut b = bank(s.clone());
        b.insert_frame(0.5, z, z);
        b.integrate_cached(0.5, 0.55, &z, &z).unwrap();
        let far = Vec3::new(0.2, 0.0, 0.0);
        assert!(matches!(
            b.integrate_cached(0.5, 0.55, &far, &z),
            Err(Error::StaleBias { .. })
        ));
        b.rebuild(0.5, far, z);
        assert_eq!(b.cache(0.5).unwrap().stats().hits, 0);
        assert!(b.cache(0.5).unwrap().is_empty());
        let c = b.integrate_cached(0.5, 0.55, &far, &z).unwrap();
        let naive = integrate_delta(&s, &far, &z, 0.5, 0.55, &n).unwrap();
        assert_same(&c, &naive, 1e-12);
        b.rebuild(0.5, far, z);
        assert!(b.cache(0.5).unwrap().is_empty());
    }

    #[test]
    fn bias_corrected_cache_matches_reintegration() {
        let s = samples(0.0, 1.0, 200.0);
        let n = NoiseParams::default();
        let z = Vec3::zeros();
        let mut b = bank(s.clone());
        b.insert_frame(0.5, z, z);
        b.integrate_cached(0.5, 0.56, &z, &z).unwrap();
        let ba = Vec3::new(0.01, -0.02, 0.005);
        let bg = Vec3::new(0.001, 0.002, -0.001);
        let c = b.integrate_cached(0.5, 0.56, &ba, &bg).unwrap();
        let full = integrate_delta(&s, &ba, &bg, 0.5, 0.56, &n).unwrap();
        assert!((c.alpha - full.alpha).norm() < 1e-5);
        assert!((c.beta - full.beta).norm() < 1e-5);
        assert!(c.dq.angle_to(&full.dq) < 1e-5);
    }

    #[test]
    fn amortized_optimization_trace() {
        let s = samples(0.0, 2.0, 200.0);
        let z = Vec3::zeros();
        let mut b = bank(s);
        b.insert_frame(1.0, z, z);
        let mut t = 1.03;
        for i in 0..200 {
            t += if i % 2 == 0 { 0.004 } else { -0.0035 };
            b.integrate_cached(1.0, t, &z, &z).unwrap();
        }
        // Span covers at most ~0.13 s, i.e. 26 read-outs.
        assert!(b.cache(1.0).unwrap().stats().integration_steps <= 30);
    }

    #[test]
    fn eviction_and_capacity() {
        let s = samples(0.0, 3.0, 200.0);
        let z = Vec3::zeros();
        let cap = CacheBank::capacity_for(0.1, 0.005);
        let mut b = CacheBank::new(NoiseParams::default(), 0.1, cap).with_samples(s).unwrap();
        b.evict_frame(1.0);
        assert!(b.is_empty());
        for k in 0..20 {
            let t = 0.5 + 0.1 * k as f64;
            b.insert_frame(t, z, z);
            for dt in [-0.1, 0.1, -0.05, 0.07] {
                b.integrate_cached(t, t + dt, &z, &z).unwrap();
            }
            if b.len() > 11 {
                let oldest = b.caches.keys().next().unwrap().0;
                b.evict_frame(oldest);
            }
            assert!(b.len() <= 11);
            assert!(b.cache(t).unwrap().len() <= 2 * cap);
        }
        b.evict_frame(0.5);
        assert!(matches!(
            b.integrate_cached(0.5, 0.55, &z, &z),
            Err(Error::UnknownFrame(_))
        ));
        assert!(b.total_stats().misses > 0);
    }

    #[test]
    fn insufficient_coverage() {
        let z = Vec3::zeros();
        let mut b = bank(samples(0.0, 1.0, 200.0));
        b.insert_frame(0.98, z, z);
        assert!(matches!(
            b.integrate_cached(0.98, 1.02, &z, &z),
            Err(Error::InsufficientImuData { .. })
        ));
    }
}
