//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code, clippy::excessive_precision, clippy::needless_range_loop)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use causelens::ingest::{standardize, RawChannel, RegularFrame, TimeSeriesFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// double-double arithmetic

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn from(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::from(q2)));
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo }.add(Dd::from(q3))
    }

    pub fn abs(self) -> Dd {
        if self.hi < 0.0 {
            self.neg()
        } else {
            self
        }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// OLS by the normal equations in double-double with partial pivoting.
/// Returns `(coefficients, rss)`, or `None` for a singular system.
pub fn ols_oracle(columns: &[Vec<f64>], y: &[f64]) -> Option<(Vec<f64>, f64)> {
    let m = columns.len();
    let n = y.len();
    let mut a = vec![vec![Dd::ZERO; m + 1]; m];
    for i in 0..m {
        for j in 0..m {
            let mut s = Dd::ZERO;
            for t in 0..n {
                s = s.add(Dd::from(columns[i][t]).mul(Dd::from(columns[j][t])));
            }
            a[i][j] = s;
        }
        let mut s = Dd::ZERO;
        for t in 0..n {
            s = s.add(Dd::from(columns[i][t]).mul(Dd::from(y[t])));
        }
        a[i][m] = s;
    }
    for col in 0..m {
        let pivot = (col..m).max_by(|&r, &s| a[r][col].abs().to_f64().total_cmp(&a[s][col].abs().to_f64()))?;
        if a[pivot][col].to_f64() == 0.0 {
            return None;
        }
        a.swap(col, pivot);
        for r in col + 1..m {
            let factor = a[r][col].div(a[col][col]);
            for c in col..=m {
                let v = a[col][c];
                a[r][c] = a[r][c].sub(factor.mul(v));
            }
        }
    }
    let mut beta = vec![Dd::ZERO; m];
    for i in (0..m).rev() {
        let mut s = a[i][m];
        for j in i + 1..m {
            s = s.sub(a[i][j].mul(beta[j]));
        }
        beta[i] = s.div(a[i][i]);
    }
    let mut rss = Dd::ZERO;
    for t in 0..n {
        let mut r = Dd::from(y[t]);
        for j in 0..m {
            r = r.sub(beta[j].mul(Dd::from(columns[j][t])));
        }
        rss = rss.add(r.mul(r));
    }
    Some((beta.into_iter().map(Dd::to_f64).collect(), rss.to_f64()))
}

/// Design of `y_t` on `y_{t-1..t-lag}` then `x_{t-1..t-lag}`, for `t >= lag`.
pub fn ar_design(y: &[f64], x: Option<&[f64]>, lag: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = y.len();
    let mut cols = Vec::new();
    for k in 1..=lag {
        cols.push((lag..n).map(|t| y[t - k]).collect());
    }
    if let Some(x) = x {
        for k in 1..=lag {
            cols.push((lag..n).map(|t| x[t - k]).collect());
        }
    }
    (cols, y[lag..].to_vec())
}

pub fn rel_norm_err(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got.iter().zip(want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE)
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// F distribution by quadrature

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for i in 0..7 {
        let dx = h * XGK[i];
        let pair = f(c - dx) + f(c + dx);
        kron += WGK[i] * pair;
        if i % 2 == 1 {
            gauss += WG[i / 2] * pair;
        }
    }
    (kron * h, (kron - gauss).abs() * h)
}

/// Adaptive Gauss-Kronrod (7, 15) over `[a, b]` to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (val, err) = gk15(f, a, b);
        if err <= tol || depth >= 50 {
            return val;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, tol / 2.0, depth + 1) + rec(f, m, b, tol / 2.0, depth + 1)
    }
    rec(f, a, b, tol, 0)
}

pub fn f_density(x: f64, d1: f64, d2: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    if x <= 0.0 {
        return 0.0;
    }
    let ln_b = ln_gamma(d1 / 2.0) + ln_gamma(d2 / 2.0) - ln_gamma((d1 + d2) / 2.0);
    let ln = 0.5 * d1 * (d1 / d2).ln() + (0.5 * d1 - 1.0) * x.ln() - 0.5 * (d1 + d2) * (1.0 + d1 * x / d2).ln() - ln_b;
    ln.exp()
}

/// Upper tail of F(d1, d2) at `f > 0` by integrating the density over
/// `[f, inf)` after the substitution `x = f / t`, `t in (0, 1]`.
pub fn f_tail_oracle(f: f64, d1: usize, d2: usize) -> f64 {
    let (d1, d2) = (d1 as f64, d2 as f64);
    let g = |t: f64| if t <= 0.0 { 0.0 } else { f_density(f / t, d1, d2) * f / (t * t) };
    integrate(&g, 0.0, 1.0, 1e-14)
}

// ---------------------------------------------------------------------------
// stub text-generation endpoint

pub struct StubServer {
    pub url: String,
    /// Request bodies in arrival order.
    pub requests: Arc<Mutex<Vec<String>>>,
}

/// Serves scripted `(status, body)` replies one per connection; the last
/// reply repeats once the script runs out.
pub fn stub_server(replies: Vec<(u16, String)>) -> StubServer {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
    let url = format!("http://{}/generate", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&requests);
    thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        content_length = v.trim().parse().unwrap_or(0);
                    }
                }
            }
            let mut body = vec![0u8; content_length];
            let _ = reader.read_exact(&mut body);
            seen.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
            let (status, reply) = &replies[i.min(replies.len() - 1)];
            let response = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            let _ = stream.write_all(response.as_bytes());
            let _ = stream.flush();
        }
    });
    StubServer { url, requests }
}

// ---------------------------------------------------------------------------
// data helpers

pub fn white_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn grid(channels: Vec<(&str, Vec<f64>)>) -> RegularFrame {
    let raw = channels.into_iter().map(|(id, v)| RawChannel::new(id, v.into_iter().map(Some).collect())).collect();
    RegularFrame::new(1_546_300_800, 3600, raw).unwrap()
}

pub fn frame(channels: Vec<(&str, Vec<f64>)>) -> TimeSeriesFrame {
    standardize(&grid(channels)).unwrap()
}

pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status.lines().find(|l| l.starts_with("VmHWM:"))?.split_whitespace().nth(1)?.parse().ok()
}
