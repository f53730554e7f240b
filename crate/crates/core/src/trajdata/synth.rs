//! Synthetic grid-world data: a rectangular road network with randomized
//! attributes and user trajectories that are random walks biased toward each
//! user's home region. Everything is a pure function of the seed.

use super::{PathStep, PathTrajectory, MAX_STEPS, MIN_STEPS};
use crate::error::{Error, Result};
use crate::numcore::stream_rng;
use crate::roadnet::{RoadNetwork, SegType, SegmentFeatures, SegmentId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Spacing between grid intersections in meters (layout only; segment
/// length attributes are drawn independently).
const SPACING_M: f64 = 150.0;
/// Raw GPS fixes arrive roughly every this many seconds of travel.
const GPS_INTERVAL_S: f64 = 15.0;
/// 2023-05-01T00:00:00Z; trajectory departures spread out from here.
const BASE_TIME_S: i64 = 1_682_899_200;

#[derive(Clone, Copy, Debug)]
pub struct GeneratorConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    pub n_trajectories: usize,
    pub n_users: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            grid_width: 8,
            grid_height: 8,
            n_trajectories: 2000,
            n_users: 10,
            seed: 7,
        }
    }
}

/// Mean GPS points expected on a step, before sampling noise: travel time
/// over the fix interval (45 s of travel -> 3 points).
pub fn expected_gps_count(travel_time_s: f64) -> f64 {
    travel_time_s / GPS_INTERVAL_S
}

/// Builds the grid network and `n_trajectories` user walks on it.
/// Deterministic: equal configs produce identical outputs.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<(RoadNetwork, Vec<PathTrajectory>)> {
    if cfg.grid_width < 2 || cfg.grid_height < 2 {
        return Err(Error::validation(format!(
            "grid must be at least 2x2, got {}x{}",
            cfg.grid_width, cfg.grid_height
        )));
    }
    if cfg.n_users == 0 {
        return Err(Error::validation("user count must be positive"));
    }

    let mut net_rng = stream_rng(cfg.seed, 1);
    let net = build_grid_network(cfg, &mut net_rng)?;

    let mut traj_rng = stream_rng(cfg.seed, 2);
    let homes: Vec<(f64, f64)> = (0..cfg.n_users)
        .map(|_| {
            (
                traj_rng.gen_range(0..cfg.grid_width) as f64 * SPACING_M,
                traj_rng.gen_range(0..cfg.grid_height) as f64 * SPACING_M,
            )
        })
        .collect();
    let coords = net.coords().expect("generator always emits coordinates").to_vec();

    let mut trajs = Vec::with_capacity(cfg.n_trajectories);
    for _ in 0..cfg.n_trajectories {
        let user = traj_rng.gen_range(0..cfg.n_users);
        trajs.push(walk(&net, &coords, homes[user], user, &mut traj_rng));
    }
    Ok((net, trajs))
}

fn build_grid_network(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<RoadNetwork> {
    let (w, h) = (cfg.grid_width, cfg.grid_height);
    let isect = |x: usize, y: usize| (x as f64 * SPACING_M, y as f64 * SPACING_M);

    // Directed segments between adjacent intersections, both ways.
    let mut endpoints: Vec<((usize, usize), (usize, usize))> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                endpoints.push(((x, y), (x + 1, y)));
                endpoints.push(((x + 1, y), (x, y)));
            }
            if y + 1 < h {
                endpoints.push(((x, y), (x, y + 1)));
                endpoints.push(((x, y + 1), (x, y)));
            }
        }
    }

    let type_pool = [
        (SegType::Motorway, 120.0, 1),
        (SegType::Trunk, 100.0, 1),
        (SegType::Primary, 80.0, 3),
        (SegType::Secondary, 60.0, 4),
        (SegType::Tertiary, 50.0, 4),
        (SegType::Residential, 30.0, 8),
        (SegType::Service, 20.0, 2),
        (SegType::Other, 40.0, 1),
    ];
    let pool_total: u32 = type_pool.iter().map(|t| t.2).sum();

    let mut features = Vec::with_capacity(endpoints.len());
    let mut coords = Vec::with_capacity(endpoints.len());
    for &(a, b) in &endpoints {
        let (ax, ay) = isect(a.0, a.1);
        let (bx, by) = isect(b.0, b.1);
        coords.push(((ax + bx) / 2.0, (ay + by) / 2.0));

        let mut pick = rng.gen_range(0..pool_total);
        let (seg_type, base_speed) = type_pool
            .iter()
            .find_map(|&(t, s, w)| {
                if pick < w {
                    Some((t, s))
                } else {
                    pick -= w;
                    None
                }
            })
            .expect("weights cover the range");

        // Compass bearing (north = 0, east = 90) with jitter.
        let bearing = match ((bx - ax).signum() as i8, (by - ay).signum() as i8) {
            (1, _) => 90.0,
            (-1, _) => 270.0,
            (_, 1) => 0.0,
            _ => 180.0,
        };
        let direction_deg = (bearing + rng.gen_range(-10.0..10.0_f64)).rem_euclid(360.0);

        let length_m = rng.gen_range(20.0..300.0_f64);
        let max_speed_kmh = base_speed * rng.gen_range(0.9..1.1);
        // typical flow around 60% of the limit
        let avg_travel_time_s =
            (length_m / (0.6 * max_speed_kmh / 3.6) * rng.gen_range(0.9..1.1)).max(1.0);

        features.push(SegmentFeatures {
            length_m,
            max_speed_kmh,
            avg_travel_time_s,
            direction_deg,
            seg_type,
            out_degree: 0,
            in_degree: 0,
        });
    }

    // Segment graph: s -> t when s ends where t starts.
    let key = |p: (usize, usize)| p.1 * w + p.0;
    let mut starting_at: Vec<Vec<SegmentId>> = vec![Vec::new(); w * h];
    for (id, &(a, _)) in endpoints.iter().enumerate() {
        starting_at[key(a)].push(id);
    }
    let mut edges = Vec::new();
    for (id, &(_, b)) in endpoints.iter().enumerate() {
        for &nxt in &starting_at[key(b)] {
            if nxt != id {
                edges.push((id, nxt));
            }
        }
    }
    RoadNetwork::new(features, &edges, Some(coords))
}

/// One home-biased random walk with timestamps and GPS counts.
fn walk(
    net: &RoadNetwork,
    coords: &[(f64, f64)],
    home: (f64, f64),
    user: usize,
    rng: &mut ChaCha8Rng,
) -> PathTrajectory {
    let n_steps = rng.gen_range(MIN_STEPS..=36.min(MAX_STEPS));

    // Start near home: one of the closest segments, softly randomized.
    let mut near: Vec<SegmentId> = (0..net.n_segments()).collect();
    let d2 = |s: SegmentId| {
        let (x, y) = coords[s];
        (x - home.0).powi(2) + (y - home.1).powi(2)
    };
    near.sort_by(|&a, &b| d2(a).partial_cmp(&d2(b)).unwrap().then(a.cmp(&b)));
    let mut current = near[rng.gen_range(0..8.min(near.len()))];

    let mut ts = BASE_TIME_S + rng.gen_range(0..30 * 86_400);
    let mut prev: Option<SegmentId> = None;
    let mut steps = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let tt = net.feature(current).avg_travel_time_s;
        let gps = if rng.gen_bool(0.15) {
            0
        } else {
            (expected_gps_count(tt) * rng.gen_range(0.6..1.4)).round() as u32
        };
        steps.push(PathStep {
            segment: current,
            timestamp_s: ts,
            gps_points: gps,
        });

        ts += (tt * rng.gen_range(0.7..1.4)).round().max(1.0) as i64;

        let nexts = net.out_neighbors(current);
        if nexts.is_empty() {
            break; // grid segments always continue somewhere, but stay safe
        }
        // Weight choices toward home, discourage immediate backtracking.
        let weights: Vec<f64> = nexts
            .iter()
            .map(|&n| {
                let pull = (-d2(n).sqrt() / (3.0 * SPACING_M)).exp();
                let backtrack = if Some(n) == prev { 0.05 } else { 1.0 };
                (pull * backtrack).max(1e-9)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut pick = rng.gen_range(0.0..total);
        let mut chosen = nexts[nexts.len() - 1];
        for (&n, &wgt) in nexts.iter().zip(&weights) {
            if pick < wgt {
                chosen = n;
                break;
            }
            pick -= wgt;
        }
        prev = Some(current);
        current = chosen;
    }
    PathTrajectory { user, steps }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expected_gps_count_is_travel_time_over_interval() {
        assert_eq!(expected_gps_count(45.0), 3.0);
        assert_eq!(expected_gps_count(0.0), 0.0);
    }

    #[test]
    fn two_by_two_generation_is_deterministic() {
        let cfg = GeneratorConfig {
            grid_width: 2,
            grid_height: 2,
            n_trajectories: 20,
            n_users: 3,
            seed: 99,
        };
        let (net_a, trajs_a) = generate_synthetic(&cfg).unwrap();
        let (net_b, trajs_b) = generate_synthetic(&cfg).unwrap();
        assert_eq!(net_a, net_b);
        assert_eq!(trajs_a, trajs_b);
        // 2x2 grid: 4 undirected adjacencies -> 8 directed segments
        assert_eq!(net_a.n_segments(), 8);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = GeneratorConfig::default();
        let a = generate_synthetic(&GeneratorConfig { n_trajectories: 10, ..cfg }).unwrap();
        let b = generate_synthetic(&GeneratorConfig {
            n_trajectories: 10,
            seed: cfg.seed + 1,
            ..cfg
        })
        .unwrap();
        assert_ne!(a.1, b.1);
    }

    #[test]
    fn zero_users_is_validation_error() {
        let cfg = GeneratorConfig {
            n_users: 0,
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn tiny_grid_is_validation_error() {
        let cfg = GeneratorConfig {
            grid_width: 1,
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn walks_respect_all_data_invariants() {
        let cfg = GeneratorConfig {
            grid_width: 5,
            grid_height: 4,
            n_trajectories: 200,
            n_users: 6,
            seed: 3,
        };
        let (net, trajs) = generate_synthetic(&cfg).unwrap();
        assert_eq!(trajs.len(), 200);
        for t in &trajs {
            assert!((MIN_STEPS..=MAX_STEPS).contains(&t.len()), "length {}", t.len());
            assert!(t.user < cfg.n_users);
            for s in &t.steps {
                assert!(net.contains(s.segment));
                assert!(s.timestamp_s >= BASE_TIME_S);
            }
            assert!(t.steps.windows(2).all(|w| w[1].timestamp_s >= w[0].timestamp_s));
            // consecutive steps are adjacent in the segment graph
            for w in t.steps.windows(2) {
                assert!(
                    net.out_neighbors(w[0].segment).contains(&w[1].segment),
                    "walk jumps from {} to {}",
                    w[0].segment,
                    w[1].segment
                );
            }
        }
        // every user appears and some steps carry zero GPS points
        let users: std::collections::BTreeSet<usize> = trajs.iter().map(|t| t.user).collect();
        assert_eq!(users.len(), cfg.n_users);
        assert!(trajs.iter().flat_map(|t| &t.steps).any(|s| s.gps_points == 0));
        assert!(trajs.iter().flat_map(|t| &t.steps).any(|s| s.gps_points > 0));
    }

    #[test]
    fn users_cluster_near_their_homes() {
        // the walk bias should keep a user's trajectories closer to their own
        // home than to the average foreign home
        let cfg = GeneratorConfig {
            grid_width: 8,
            grid_height: 8,
            n_trajectories: 300,
            n_users: 4,
            seed: 11,
        };
        let (net, trajs) = generate_synthetic(&cfg).unwrap();
        let coords = net.coords().unwrap();
        // recover per-user centroids
        let mut sums = vec![(0.0, 0.0, 0usize); cfg.n_users];
        for t in &trajs {
            for s in &t.steps {
                let (x, y) = coords[s.segment];
                sums[t.user].0 += x;
                sums[t.user].1 += y;
                sums[t.user].2 += 1;
            }
        }
        let centroids: Vec<(f64, f64)> = sums
            .iter()
            .map(|&(x, y, n)| (x / n as f64, y / n as f64))
            .collect();
        let mut own = 0.0;
        let mut foreign = 0.0;
        let mut n_own = 0;
        let mut n_foreign = 0;
        for t in &trajs {
            for s in &t.steps {
                let (x, y) = coords[s.segment];
                for (u, c) in centroids.iter().enumerate() {
                    let d = ((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt();
                    if u == t.user {
                        own += d;
                        n_own += 1;
                    } else {
                        foreign += d;
                        n_foreign += 1;
                    }
                }
            }
        }
        let own_mean = own / n_own as f64;
        let foreign_mean = foreign / n_foreign as f64;
        assert!(
            own_mean < foreign_mean,
            "no home clustering: own {own_mean} foreign {foreign_mean}"
        );
    }
}
