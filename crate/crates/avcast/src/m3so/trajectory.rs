//! Sprite motion: rectilinear segments, wall and obstacle reflections
//! with a bounded random direction change, constant speed throughout.

use super::{M3soConfig, Rect};
use crate::error::{AvError, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Wall,
    Block,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    /// 0-based frame index at which the reflected motion takes effect.
    pub frame: usize,
    pub kind: EventKind,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Per-frame sprite top-left position, pixels (floats).
    pub positions: Vec<(f64, f64)>,
    /// Velocity that produced each position from its predecessor.
    pub velocities: Vec<(f64, f64)>,
    pub events: Vec<Event>,
    /// Obstacle rectangle, present once `block_frame` is reached.
    pub block_box: Option<Rect>,
}

/// Maximum random rotation applied to the reflected direction.
const BOUNCE_JITTER_RAD: f64 = 30.0 * std::f64::consts::PI / 180.0;
/// Gap kept between the sprite and the obstacle so they never share an
/// edge in the rendered frames.
const BLOCK_GAP: f64 = 1.0;

pub fn synth_trajectory(cfg: &M3soConfig, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    cfg.validate()?;
    let sprite = cfg.sprite_size() as f64;
    let lim = cfg.box_size as f64 - sprite;
    if lim <= 0.0 {
        return Err(AvError::invalid("synth_trajectory", "sprite larger than box"));
    }
    let t_total = cfg.frames_per_clip;
    let mut positions = Vec::with_capacity(t_total);
    let mut velocities = Vec::with_capacity(t_total);
    let mut events = Vec::new();

    let mut pos = (rng.gen_range(0.0..lim), rng.gen_range(0.0..lim));
    let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut vel = (speed * theta.cos(), speed * theta.sin());
    let mut block: Option<Rect> = None;
    // 0-based frame at which the block appears.
    let block_at = cfg.block_enabled.then(|| cfg.block_frame - 1);

    if t_total == 0 {
        return Ok(Trajectory {
            positions,
            velocities,
            events,
            block_box: None,
        });
    }

    positions.push(pos);
    velocities.push(vel);
    if block_at == Some(0) {
        block = Some(place_block(cfg, pos, rng));
    }

    for frame in 1..t_total {
        if block_at == Some(frame) {
            block = Some(place_block(cfg, pos, rng));
        }
        let step = advance(pos, vel, lim, sprite, block.as_ref(), rng);
        pos = step.pos;
        vel = step.vel;
        positions.push(pos);
        velocities.push(vel);
        if step.hit_wall {
            events.push(Event {
                frame,
                kind: EventKind::Wall,
            });
        }
        if step.hit_block {
            events.push(Event {
                frame,
                kind: EventKind::Block,
            });
        }
    }

    Ok(Trajectory {
        positions,
        velocities,
        events,
        block_box: block,
    })
}

struct StepResult {
    pos: (f64, f64),
    vel: (f64, f64),
    hit_wall: bool,
    hit_block: bool,
}

fn advance(
    pos: (f64, f64),
    vel: (f64, f64),
    lim: f64,
    sprite: f64,
    block: Option<&Rect>,
    rng: &mut ChaCha8Rng,
) -> StepResult {
    let tentative = (pos.0 + vel.0, pos.1 + vel.1);
    let wall_x = tentative.0 < 0.0 || tentative.0 > lim;
    let wall_y = tentative.1 < 0.0 || tentative.1 > lim;
    let block_hit = block.map(|b| overlaps_block(tentative, sprite, b)).unwrap_or(false);

    if !wall_x && !wall_y && !block_hit {
        return StepResult {
            pos: tentative,
            vel,
            hit_wall: false,
            hit_block: false,
        };
    }

    // Reflect the normal components of whichever surface was crossed.
    let mut reflected = vel;
    if wall_x {
        reflected.0 = -reflected.0;
    }
    if wall_y {
        reflected.1 = -reflected.1;
    }
    if block_hit {
        let b = block.unwrap();
        let (ox, oy) = block_outside(pos, sprite, b);
        // Reflect along the axes the sprite entered from; corner entries
        // flip both.
        if ox {
            reflected.0 = -reflected.0;
        }
        if oy {
            reflected.1 = -reflected.1;
        }
        if !ox && !oy {
            reflected = (-reflected.0, -reflected.1);
        }
    }

    let speed = (vel.0 * vel.0 + vel.1 * vel.1).sqrt();
    // Re-randomize direction within a bounded cone around the reflection,
    // keeping the next position legal; fall back to the pure reflection.
    for _ in 0..8 {
        let jitter = rng.gen_range(-BOUNCE_JITTER_RAD..=BOUNCE_JITTER_RAD);
        let base = reflected.1.atan2(reflected.0);
        let cand = (speed * (base + jitter).cos(), speed * (base + jitter).sin());
        let next = (pos.0 + cand.0, pos.1 + cand.1);
        if in_bounds(next, lim) && block.map(|b| !overlaps_block(next, sprite, b)).unwrap_or(true) {
            return StepResult {
                pos: next,
                vel: cand,
                hit_wall: wall_x || wall_y,
                hit_block: block_hit,
            };
        }
    }
    let next = (
        (pos.0 + reflected.0).clamp(0.0, lim),
        (pos.1 + reflected.1).clamp(0.0, lim),
    );
    StepResult {
        pos: next,
        vel: reflected,
        hit_wall: wall_x || wall_y,
        hit_block: block_hit,
    }
}

fn in_bounds(p: (f64, f64), lim: f64) -> bool {
    p.0 >= 0.0 && p.0 <= lim && p.1 >= 0.0 && p.1 <= lim
}

/// Sprite rect vs block rect inflated by BLOCK_GAP.
fn overlaps_block(p: (f64, f64), sprite: f64, b: &Rect) -> bool {
    let bx0 = b.x as f64 - BLOCK_GAP;
    let by0 = b.y as f64 - BLOCK_GAP;
    let bx1 = (b.x + b.w) as f64 + BLOCK_GAP;
    let by1 = (b.y + b.h) as f64 + BLOCK_GAP;
    p.0 < bx1 && p.0 + sprite > bx0 && p.1 < by1 && p.1 + sprite > by0
}

/// Which axes the sprite is fully outside of, relative to the block.
fn block_outside(p: (f64, f64), sprite: f64, b: &Rect) -> (bool, bool) {
    let bx0 = b.x as f64 - BLOCK_GAP;
    let by0 = b.y as f64 - BLOCK_GAP;
    let bx1 = (b.x + b.w) as f64 + BLOCK_GAP;
    let by1 = (b.y + b.h) as f64 + BLOCK_GAP;
    let outside_x = p.0 + sprite <= bx0 || p.0 >= bx1;
    let outside_y = p.1 + sprite <= by0 || p.1 >= by1;
    (outside_x, outside_y)
}

/// Uniform placement keeping the block fully inside the box and disjoint
/// from the sprite (with a one-pixel gap) at the moment it appears.
fn place_block(cfg: &M3soConfig, sprite_pos: (f64, f64), rng: &mut ChaCha8Rng) -> Rect {
    let bs = cfg.block_size;
    let max = cfg.box_size - bs;
    let sprite = cfg.sprite_size() as f64;
    loop {
        let r = Rect {
            x: rng.gen_range(0..=max),
            y: rng.gen_range(0..=max),
            w: bs,
            h: bs,
        };
        if !overlaps_block(sprite_pos, sprite, &r) {
            return r;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::m3so::M3soConfig;
    use rand::SeedableRng;

    fn cfg_nb() -> M3soConfig {
        M3soConfig {
            block_enabled: false,
            frames_per_clip: 40,
            ..M3soConfig::default()
        }
    }

    #[test]
    fn right_wall_reflects_vx() {
        let cfg = cfg_nb();
        let lim = cfg.box_size as f64 - cfg.sprite_size() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let step = super::advance((lim - 0.5, 10.0), (2.0, 0.0), lim, 16.0, None, &mut rng);
        assert!(step.vel.0 < 0.0);
        assert!(step.hit_wall);
    }

    #[test]
    fn block_disabled_yields_only_wall_events() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traj = synth_trajectory(&cfg_nb(), &mut rng).unwrap();
        assert!(traj.events.iter().all(|e| e.kind == EventKind::Wall));
        assert!(traj.block_box.is_none());
    }

    #[test]
    fn same_seed_is_deterministic() {
        let cfg = M3soConfig {
            frames_per_clip: 50,
            ..M3soConfig::default()
        };
        let a = synth_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synth_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.positions, b.positions);
        assert_eq!(a.events, b.events);
        assert_eq!(a.block_box, b.block_box);
    }

    #[test]
    fn positions_keep_sprite_inside_and_off_block() {
        for seed in 0..20 {
            let cfg = M3soConfig {
                frames_per_clip: 80,
                block_frame: 30,
                ..M3soConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let traj = synth_trajectory(&cfg, &mut rng).unwrap();
            let lim = cfg.box_size as f64 - cfg.sprite_size() as f64;
            for (i, &p) in traj.positions.iter().enumerate() {
                assert!(in_bounds(p, lim), "seed {seed} frame {i} out of bounds: {p:?}");
                if i >= cfg.block_frame - 1 {
                    let b = traj.block_box.as_ref().unwrap();
                    let s = cfg.sprite_size() as f64;
                    // Disjoint without the gap inflation.
                    let disjoint = p.0 + s <= b.x as f64
                        || p.0 >= (b.x + b.w) as f64
                        || p.1 + s <= b.y as f64
                        || p.1 >= (b.y + b.h) as f64;
                    assert!(disjoint, "seed {seed} frame {i} overlaps block");
                }
            }
        }
    }

    #[test]
    fn rectilinear_between_events() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let traj = synth_trajectory(&cfg_nb(), &mut rng).unwrap();
        let event_frames: Vec<usize> = traj.events.iter().map(|e| e.frame).collect();
        for i in 2..traj.positions.len() {
            // Second difference must vanish unless frame i or i-1 carries
            // an event (the kink between segments).
            if event_frames.contains(&i) || event_frames.contains(&(i - 1)) {
                continue;
            }
            let (a, b, c) = (traj.positions[i - 2], traj.positions[i - 1], traj.positions[i]);
            let d2 = ((c.0 - b.0) - (b.0 - a.0), (c.1 - b.1) - (b.1 - a.1));
            assert!(d2.0.abs() < 1e-9 && d2.1.abs() < 1e-9, "frame {i}: {d2:?}");
        }
    }

    #[test]
    fn speed_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let traj = synth_trajectory(&cfg_nb(), &mut rng).unwrap();
        let speeds: Vec<f64> = traj
            .velocities
            .iter()
            .map(|v| (v.0 * v.0 + v.1 * v.1).sqrt())
            .collect();
        for s in &speeds[1..] {
            assert!((s - speeds[0]).abs() < 1e-9);
        }
    }
}
