//! Command script generation at the control rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::motion::ControlCommand;

/// Maximum commanded speed of the platform.
pub const MAX_SPEED: f64 = 0.5;

/// Piecewise command profile; values are emitted zero-order-hold at the
/// control rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptSegment {
    /// Hold (v, omega) for `duration` seconds.
    Hold { duration: f64, v: f64, omega: f64 },
    /// Linearly ramp from the previous endpoint to (v, omega).
    Ramp { duration: f64, v: f64, omega: f64 },
}

/// Named script presets used by the configuration files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ScriptPreset {
    /// Stationary start, slow ramps, gently varying arcs. Command
    /// derivatives stay small relative to the command window span.
    Smooth,
    /// Stationary start followed by seeded speed changes, turns and
    /// stop-and-go phases; rich excitation for calibration.
    Varied,
    /// Stationary start, then frequent step changes of speed and turn
    /// rate with no ramps; maximizes the cost of ignoring the
    /// command-to-execution delay.
    Steps,
    /// Stationary start, then a long constant-velocity straight.
    ConstantVelocity,
    /// No motion at all.
    Stationary,
    /// Explicit segments.
    Segments,
}

/// Emit commands for explicit segments at `control_rate`.
pub fn from_segments(segments: &[ScriptSegment], control_rate: u32) -> Vec<ControlCommand> {
    let dt = 1.0 / control_rate as f64;
    let mut out: Vec<ControlCommand> = Vec::new();
    let mut last = (0.0, 0.0);
    // Timestamps are index-based (k / rate) so they stay exact multiples
    // of the control period instead of accumulating rounding drift.
    let mut idx = 0u64;
    for seg in segments {
        match seg {
            ScriptSegment::Hold { duration, v, omega } => {
                let n = (duration / dt).round() as usize;
                for _ in 0..n {
                    out.push(ControlCommand {
                        t: idx as f64 / control_rate as f64,
                        v: clamp_speed(*v),
                        omega: *omega,
                    });
                    idx += 1;
                }
                last = (*v, *omega);
            }
            ScriptSegment::Ramp { duration, v, omega } => {
                let n = (duration / dt).round() as usize;
                for k in 0..n {
                    let a = (k + 1) as f64 / n as f64;
                    out.push(ControlCommand {
                        t: idx as f64 / control_rate as f64,
                        v: clamp_speed(last.0 + a * (v - last.0)),
                        omega: last.1 + a * (omega - last.1),
                    });
                    idx += 1;
                }
                last = (*v, *omega);
            }
        }
    }
    out
}

fn clamp_speed(v: f64) -> f64 {
    v.clamp(-MAX_SPEED, MAX_SPEED)
}

/// Build a preset script covering `duration` seconds.
pub fn build_preset(
    preset: &ScriptPreset,
    duration: f64,
    control_rate: u32,
    seed: u64,
) -> Vec<ControlCommand> {
    let segments = match preset {
        ScriptPreset::Stationary => vec![ScriptSegment::Hold {
            duration,
            v: 0.0,
            omega: 0.0,
        }],
        ScriptPreset::ConstantVelocity => vec![
            ScriptSegment::Hold {
                duration: 1.5,
                v: 0.0,
                omega: 0.0,
            },
            ScriptSegment::Ramp {
                duration: 1.5,
                v: 0.35,
                omega: 0.0,
            },
            ScriptSegment::Hold {
                duration: (duration - 3.0).max(0.0),
                v: 0.35,
                omega: 0.0,
            },
        ],
        ScriptPreset::Smooth => smooth_segments(duration),
        ScriptPreset::Varied => varied_segments(duration, seed),
        ScriptPreset::Steps => step_segments(duration, seed),
        ScriptPreset::Segments => Vec::new(),
    };
    from_segments(&segments, control_rate)
}

fn step_segments(duration: f64, seed: u64) -> Vec<ScriptSegment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2d_90e3);
    let mut segs = vec![ScriptSegment::Hold {
        duration: 1.5,
        v: 0.0,
        omega: 0.0,
    }];
    let mut t = 1.5;
    while t < duration {
        let len: f64 = rng.gen_range(0.5..1.0);
        let v = if rng.gen_bool(0.15) {
            0.0
        } else {
            rng.gen_range(0.1..0.45)
        };
        let omega = if rng.gen_bool(0.3) {
            0.0
        } else {
            rng.gen_range(-0.8..0.8)
        };
        segs.push(ScriptSegment::Hold {
            duration: len,
            v,
            omega,
        });
        t += len;
    }
    segs
}

fn smooth_segments(duration: f64) -> Vec<ScriptSegment> {
    let mut segs = vec![
        ScriptSegment::Hold {
            duration: 1.5,
            v: 0.0,
            omega: 0.0,
        },
        ScriptSegment::Ramp {
            duration: 4.0,
            v: 0.32,
            omega: 0.0,
        },
    ];
    let mut t = 5.5;
    // Long alternating arcs with slow omega ramps and small speed swells.
    let mut k = 0usize;
    while t < duration {
        let len = 6.0f64.min(duration - t).max(0.5);
        let omega = if k % 2 == 0 { 0.25 } else { -0.25 };
        let v = if k % 3 == 0 { 0.36 } else { 0.30 };
        segs.push(ScriptSegment::Ramp {
            duration: len,
            v,
            omega,
        });
        t += len;
        k += 1;
    }
    segs
}

fn varied_segments(duration: f64, seed: u64) -> Vec<ScriptSegment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5c71_37a1);
    let mut segs = vec![ScriptSegment::Hold {
        duration: 1.5,
        v: 0.0,
        omega: 0.0,
    }];
    let mut t = 1.5;
    while t < duration {
        let len: f64 = rng.gen_range(1.0..3.0);
        let style = rng.gen_range(0u32..6);
        let seg = match style {
            0 => ScriptSegment::Ramp {
                duration: len,
                v: rng.gen_range(0.15..0.45),
                omega: rng.gen_range(-0.3..0.3),
            },
            1 => ScriptSegment::Ramp {
                duration: len,
                v: rng.gen_range(0.1..0.3),
                omega: rng.gen_range(-0.8..0.8),
            },
            2 => ScriptSegment::Hold {
                duration: len,
                v: rng.gen_range(0.2..0.45),
                omega: rng.gen_range(-0.4..0.4),
            },
            3 => ScriptSegment::Ramp {
                duration: len,
                v: 0.0,
                omega: 0.0,
            },
            4 => ScriptSegment::Hold {
                duration: len,
                v: rng.gen_range(0.25..0.45),
                omega: 0.0,
            },
            _ => ScriptSegment::Ramp {
                duration: len,
                v: rng.gen_range(0.1..0.4),
                omega: rng.gen_range(-0.6..0.6),
            },
        };
        t += len;
        segs.push(seg);
    }
    segs
}
