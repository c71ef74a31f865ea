//! Waypoint path with smooth heading blending at corners and a
//! trapezoidal speed profile.
//!
//! The path is parameterized by arc length: straight runs joined by
//! corner pieces whose heading follows a smoothstep, so heading is C1
//! and yaw rate is continuous (zero at piece boundaries). Corner pieces
//! cut the waypoint corner slightly; the generated path itself is the
//! ground truth. Speed ramps linearly from rest at the start and back to
//! rest at the end, with the cruise speed chosen so the total duration
//! stays `length / nominal_speed`; the ramps make the start/stop
//! accelerations visible to the synthesized IMU.

const GL16_NODES: [f64; 16] = [
    -0.9894009349916499,
    -0.9445750230732326,
    -0.8656312023878318,
    -0.7554044083550030,
    -0.6178762444026438,
    -0.4580167776572274,
    -0.2816035507792589,
    -0.0950125098376374,
    0.0950125098376374,
    0.2816035507792589,
    0.4580167776572274,
    0.6178762444026438,
    0.7554044083550030,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GL16_WEIGHTS: [f64; 16] = [
    0.0271524594117541,
    0.0622535239386479,
    0.0951585116824928,
    0.1246289712555339,
    0.1495959888165767,
    0.1691565193950025,
    0.1826034150449236,
    0.1894506104550685,
    0.1894506104550685,
    0.1826034150449236,
    0.1691565193950025,
    0.1495959888165767,
    0.1246289712555339,
    0.0951585116824928,
    0.0622535239386479,
    0.0271524594117541,
];

fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

fn smoothstep_deriv(u: f64) -> f64 {
    6.0 * u * (1.0 - u)
}

#[derive(Debug, Clone)]
enum Piece {
    Straight {
        start: (f64, f64),
        heading: f64,
    },
    Corner {
        start: (f64, f64),
        psi0: f64,
        dpsi: f64,
        arc_len: f64,
    },
}

#[derive(Debug, Clone)]
struct PlacedPiece {
    s0: f64,
    len: f64,
    piece: Piece,
}

/// Kinematic sample of the path at one time.
#[derive(Debug, Clone, Copy)]
pub struct PathSample {
    pub position: (f64, f64),
    pub heading: f64,
    pub velocity: (f64, f64),
    pub accel: (f64, f64),
    pub yaw_rate: f64,
}

#[derive(Debug, Clone)]
pub struct PathModel {
    pieces: Vec<PlacedPiece>,
    total_len: f64,
    speed: f64,
    hold_time: f64,
}

fn heading_of(a: (f64, f64), b: (f64, f64)) -> f64 {
    (b.1 - a.1).atan2(b.0 - a.0)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt()
}

fn wrap(theta: f64) -> f64 {
    let mut a = theta % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

impl Piece {
    /// Position, heading and heading-derivative at arc offset `s` into the piece.
    fn sample(&self, s: f64) -> ((f64, f64), f64, f64) {
        match self {
            Piece::Straight { start, heading } => {
                let pos = (
                    start.0 + s * heading.cos(),
                    start.1 + s * heading.sin(),
                );
                (pos, *heading, 0.0)
            }
            Piece::Corner {
                start,
                psi0,
                dpsi,
                arc_len,
            } => {
                let u = (s / arc_len).clamp(0.0, 1.0);
                let psi = psi0 + dpsi * smoothstep(u);
                let dpsi_ds = dpsi * smoothstep_deriv(u) / arc_len;
                // Integrate the unit tangent over [0, s] by quadrature.
                let half = s * 0.5;
                let mut x = start.0;
                let mut y = start.1;
                for (node, w) in GL16_NODES.iter().zip(GL16_WEIGHTS.iter()) {
                    let a = half + node * half;
                    let ua = (a / arc_len).clamp(0.0, 1.0);
                    let pa = psi0 + dpsi * smoothstep(ua);
                    x += w * half * pa.cos();
                    y += w * half * pa.sin();
                }
                ((x, y), psi, dpsi_ds)
            }
        }
    }
}

impl PathModel {
    /// Corner blend arc length scales with this turn radius.
    const TURN_RADIUS: f64 = 0.5;

    pub fn new(waypoints: &[(f64, f64)], speed: f64, hold_time: f64) -> Self {
        assert!(waypoints.len() >= 2, "need at least two waypoints");
        assert!(speed > 0.0, "speed must be positive");

        // Drop zero-length legs.
        let mut pts: Vec<(f64, f64)> = vec![waypoints[0]];
        for &w in &waypoints[1..] {
            if dist(*pts.last().unwrap(), w) > 1e-12 {
                pts.push(w);
            }
        }

        let mut pieces: Vec<PlacedPiece> = Vec::new();
        let mut total_len = 0.0;
        if pts.len() < 2 {
            // Fully stationary path.
            pieces.push(PlacedPiece {
                s0: 0.0,
                len: 0.0,
                piece: Piece::Straight {
                    start: pts[0],
                    heading: 0.0,
                },
            });
            return Self {
                pieces,
                total_len,
                speed,
                hold_time,
            };
        }

        let n_legs = pts.len() - 1;
        let leg_len: Vec<f64> = (0..n_legs).map(|i| dist(pts[i], pts[i + 1])).collect();
        let headings: Vec<f64> = (0..n_legs).map(|i| heading_of(pts[i], pts[i + 1])).collect();

        // Arc length consumed by the corner at interior waypoint i (before/after split evenly).
        let mut corner_arc = vec![0.0; pts.len()];
        for i in 1..n_legs {
            let dpsi = wrap(headings[i] - headings[i - 1]);
            if dpsi.abs() > 1e-9 {
                let want = dpsi.abs() * Self::TURN_RADIUS;
                let cap = 0.8 * leg_len[i - 1].min(leg_len[i]);
                corner_arc[i] = want.min(cap);
            }
        }

        let mut cursor = pts[0];
        for i in 0..n_legs {
            let cut_start = corner_arc[i] * 0.5;
            let cut_end = corner_arc[i + 1] * 0.5;
            let straight_len = (leg_len[i] - cut_start - cut_end).max(0.0);
            if straight_len > 0.0 {
                let piece = Piece::Straight {
                    start: cursor,
                    heading: headings[i],
                };
                let (end, _, _) = piece.sample(straight_len);
                pieces.push(PlacedPiece {
                    s0: total_len,
                    len: straight_len,
                    piece,
                });
                total_len += straight_len;
                cursor = end;
            }
            if i + 1 < n_legs && corner_arc[i + 1] > 0.0 {
                let dpsi = wrap(headings[i + 1] - headings[i]);
                let piece = Piece::Corner {
                    start: cursor,
                    psi0: headings[i],
                    dpsi,
                    arc_len: corner_arc[i + 1],
                };
                let (end, _, _) = piece.sample(corner_arc[i + 1]);
                pieces.push(PlacedPiece {
                    s0: total_len,
                    len: corner_arc[i + 1],
                    piece,
                });
                total_len += corner_arc[i + 1];
                cursor = end;
            }
        }

        Self {
            pieces,
            total_len,
            speed,
            hold_time,
        }
    }

    /// Speed ramp duration at each end (s).
    const RAMP_TIME: f64 = 3.0;

    /// Time to traverse the whole path, including the final hold.
    pub fn total_time(&self) -> f64 {
        self.total_len / self.speed + self.hold_time
    }

    pub fn total_length(&self) -> f64 {
        self.total_len
    }

    /// Trapezoidal speed profile over the fixed travel time: linear
    /// ramps of length `ramp` at both ends, cruise in between, total
    /// distance preserved. Returns (arc position, speed, acceleration).
    fn profile(&self, t: f64) -> (f64, f64, f64) {
        let travel = self.total_len / self.speed;
        if self.total_len <= 0.0 || t <= 0.0 || t >= travel {
            let s = if t <= 0.0 { 0.0 } else { self.total_len };
            return (s, 0.0, 0.0);
        }
        let ramp = Self::RAMP_TIME.min(0.25 * travel);
        let cruise = self.total_len / (travel - ramp);
        if t < ramp {
            let v = cruise * t / ramp;
            (0.5 * cruise * t * t / ramp, v, cruise / ramp)
        } else if t <= travel - ramp {
            (cruise * (t - 0.5 * ramp), cruise, 0.0)
        } else {
            let tau = travel - t;
            let v = cruise * tau / ramp;
            (
                self.total_len - 0.5 * cruise * tau * tau / ramp,
                v,
                -cruise / ramp,
            )
        }
    }

    fn piece_at(&self, s: f64) -> (&PlacedPiece, f64) {
        let idx = match self
            .pieces
            .binary_search_by(|p| p.s0.partial_cmp(&s).unwrap())
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        let p = &self.pieces[idx];
        (p, (s - p.s0).clamp(0.0, p.len))
    }

    /// Kinematics at time t; clamped to the path ends (device at rest
    /// before 0 and after the end of travel).
    pub fn sample(&self, t: f64) -> PathSample {
        let (s, v, v_dot) = self.profile(t);
        let (placed, local) = self.piece_at(s);
        let (position, heading, dpsi_ds) = placed.piece.sample(local);
        if v == 0.0 {
            return PathSample {
                position,
                heading,
                velocity: (0.0, 0.0),
                accel: (0.0, 0.0),
                yaw_rate: 0.0,
            };
        }
        let yaw_rate = v * dpsi_ds;
        let (sh, ch) = heading.sin_cos();
        PathSample {
            position,
            heading,
            velocity: (v * ch, v * sh),
            // Tangential plus centripetal components.
            accel: (
                v_dot * ch - v * yaw_rate * sh,
                v_dot * sh + v * yaw_rate * ch,
            ),
            yaw_rate,
        }
    }
}
