//! Harmonic toy molecule: each atom is tethered to a center and every pair
//! is joined by a soft spring. Plays the reference simulator for the MD
//! problem and the velocity-Verlet fixture.

use crate::value::Atom;

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicSystem {
    pub centers: Vec<[f64; 3]>,
    pub z: Vec<f64>,
    pub k: f64,
    pub kappa: f64,
    pub r0: f64,
    pub mass: f64,
}

impl Default for HarmonicSystem {
    fn default() -> HarmonicSystem {
        HarmonicSystem {
            centers: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            z: vec![8.0, 1.0, 1.0],
            k: 1.0,
            kappa: 0.1,
            r0: 1.0,
            mass: 1.0,
        }
    }
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: &[f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl HarmonicSystem {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn potential(&self, pos: &[[f64; 3]]) -> f64 {
        let mut e = 0.0;
        for (x, c) in pos.iter().zip(&self.centers) {
            let d = sub(x, c);
            e += 0.5 * self.k * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        }
        for i in 0..pos.len() {
            for j in i + 1..pos.len() {
                let r = norm(&sub(&pos[i], &pos[j]));
                e += 0.5 * self.kappa * (r - self.r0).powi(2);
            }
        }
        e
    }

    /// Analytic forces, `-dE/dx`.
    pub fn forces(&self, pos: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let mut f: Vec<[f64; 3]> = pos
            .iter()
            .zip(&self.centers)
            .map(|(x, c)| {
                let d = sub(x, c);
                [-self.k * d[0], -self.k * d[1], -self.k * d[2]]
            })
            .collect();
        for i in 0..pos.len() {
            for j in i + 1..pos.len() {
                let d = sub(&pos[i], &pos[j]);
                let r = norm(&d);
                if r == 0.0 {
                    continue;
                }
                let s = -self.kappa * (r - self.r0) / r;
                for a in 0..3 {
                    f[i][a] += s * d[a];
                    f[j][a] -= s * d[a];
                }
            }
        }
        f
    }

    pub fn kinetic(&self, vel: &[[f64; 3]]) -> f64 {
        vel.iter().map(|v| 0.5 * self.mass * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2])).sum()
    }

    pub fn total_energy(&self, pos: &[[f64; 3]], vel: &[[f64; 3]]) -> f64 {
        self.potential(pos) + self.kinetic(vel)
    }

    pub fn atoms(&self, pos: &[[f64; 3]], vel: &[[f64; 3]]) -> Vec<Atom> {
        self.z.iter().zip(pos).zip(vel).map(|((z, p), v)| Atom { z: *z, pos: *p, vel: *v }).collect()
    }
}

/// Positions and velocities after each step, starting with the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub pos: Vec<Vec<[f64; 3]>>,
    pub vel: Vec<Vec<[f64; 3]>>,
}

/// Velocity Verlet with a caller-supplied force field.
pub fn velocity_verlet<E>(
    pos: &[[f64; 3]],
    vel: &[[f64; 3]],
    mass: f64,
    h: f64,
    steps: usize,
    mut forces: impl FnMut(&[[f64; 3]]) -> Result<Vec<[f64; 3]>, E>,
) -> Result<Trajectory, E> {
    let mut x = pos.to_vec();
    let mut v = vel.to_vec();
    let mut f = forces(&x)?;
    let mut traj = Trajectory { pos: vec![x.clone()], vel: vec![v.clone()] };
    for _ in 0..steps {
        for i in 0..x.len() {
            for a in 0..3 {
                v[i][a] += 0.5 * h * f[i][a] / mass;
                x[i][a] += h * v[i][a];
            }
        }
        f = forces(&x)?;
        for i in 0..x.len() {
            for a in 0..3 {
                v[i][a] += 0.5 * h * f[i][a] / mass;
            }
        }
        traj.pos.push(x.clone());
        traj.vel.push(v.clone());
    }
    Ok(traj)
}

/// Root-mean-square deviation over every coordinate of every frame.
pub fn rmsd(a: &[Vec<[f64; 3]>], b: &[Vec<[f64; 3]>]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (fa, fb) in a.iter().zip(b) {
        for (p, q) in fa.iter().zip(fb) {
            for k in 0..3 {
                s += (p[k] - q[k]).powi(2);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forces_match_finite_differences() {
        let sys = HarmonicSystem::default();
        let pos = vec![[0.1, -0.2, 0.05], [1.2, 0.1, -0.1], [-0.1, 0.8, 0.3]];
        let f = sys.forces(&pos);
        let eps = 1e-6;
        for i in 0..3 {
            for a in 0..3 {
                let mut p = pos.clone();
                p[i][a] += eps;
                let up = sys.potential(&p);
                p[i][a] -= 2.0 * eps;
                let dn = sys.potential(&p);
                let fd = -(up - dn) / (2.0 * eps);
                assert!((fd - f[i][a]).abs() < 1e-8, "{i},{a}: {fd} vs {}", f[i][a]);
            }
        }
    }

    #[test]
    fn free_particle_moves_in_a_line() {
        let t = velocity_verlet::<()>(&[[0.0; 3]], &[[1.0, 0.0, 0.0]], 1.0, 0.1, 10, |x: &[[f64; 3]]| {
            Ok(vec![[0.0; 3]; x.len()])
        })
        .unwrap();
        assert!((t.pos[10][0][0] - 1.0).abs() < 1e-12);
        assert_eq!(rmsd(&t.pos, &t.pos), 0.0);
    }
}
