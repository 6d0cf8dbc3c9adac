/// Scalar signal that holds piecewise-constant levels joined by quintic
/// smoothstep transitions, so value, slope and curvature are continuous.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SmoothSchedule {
    base: f64,
    steps: Vec<Step>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Step {
    start: f64,
    duration: f64,
    delta: f64,
}

impl SmoothSchedule {
    pub fn constant(base: f64) -> Self {
        SmoothSchedule {
            base,
            steps: Vec::new(),
        }
    }

    /// Adds a transition by `delta` that begins at `start` and lasts `duration`.
    pub fn push(&mut self, start: f64, duration: f64, delta: f64) {
        self.steps.push(Step {
            start,
            duration: duration.max(1e-6),
            delta,
        });
    }

    /// Level reached once every transition has finished.
    pub fn final_value(&self) -> f64 {
        self.base + self.steps.iter().map(|s| s.delta).sum::<f64>()
    }

    pub fn value(&self, t: f64) -> f64 {
        self.eval(t)[0]
    }

    /// `[f, f', f'']` at `t`.
    pub fn eval(&self, t: f64) -> [f64; 3] {
        let mut out = [self.base, 0.0, 0.0];
        for s in &self.steps {
            let u = (t - s.start) / s.duration;
            if u <= 0.0 {
                continue;
            }
            if u >= 1.0 {
                out[0] += s.delta;
                continue;
            }
            let (u2, u3) = (u * u, u * u * u);
            out[0] += s.delta * u3 * (10.0 - 15.0 * u + 6.0 * u2);
            out[1] += s.delta * 30.0 * u2 * (1.0 - u) * (1.0 - u) / s.duration;
            out[2] += s.delta * 60.0 * u * (1.0 - 3.0 * u + 2.0 * u2) / (s.duration * s.duration);
        }
        out
    }
}
