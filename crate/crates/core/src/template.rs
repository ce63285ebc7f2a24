//! Multi-scale window abstraction of event streams.
//!
//! Each window's mean embedding is softly assigned to the prototype
//! codebook with a distance softmax; the assignments of all windows that
//! start at a position are averaged over scales and mapped back through
//! the prototypes, giving one template vector per event.

use std::io::Write;
use std::ops::Range;

use serde::Serialize;

use crate::embedding::{sq_dist, EventVector, PrototypeCodebook};
use crate::error::{Error, Result};

pub const DEFAULT_SCALES: [usize; 3] = [3, 5, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSet {
    pub scale: usize,
    /// Number of windows, `T - scale + 1`.
    pub count: usize,
}

impl WindowSet {
    pub fn window(&self, start: usize) -> Range<usize> {
        start..start + self.scale
    }

    pub fn windows(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.count).map(|i| self.window(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Windows {
    pub sets: Vec<WindowSet>,
    /// Requested scales longer than the stream.
    pub skipped: Vec<usize>,
}

/// All contiguous windows at every scale that fits in a stream of length `len`.
pub fn extract_windows(len: usize, scales: &[usize]) -> Result<Windows> {
    if len == 0 {
        return Err(Error::DegenerateInput {
            len,
            scales: scales.to_vec(),
        });
    }
    let mut sets = Vec::new();
    let mut skipped = Vec::new();
    for &s in scales {
        if s == 0 {
            return Err(Error::Config("window scale must be at least 1".into()));
        }
        if s <= len {
            sets.push(WindowSet {
                scale: s,
                count: len - s + 1,
            });
        } else {
            skipped.push(s);
        }
    }
    if sets.is_empty() {
        return Err(Error::DegenerateInput {
            len,
            scales: scales.to_vec(),
        });
    }
    Ok(Windows { sets, skipped })
}

pub fn window_mean(events: &[EventVector]) -> EventVector {
    assert!(!events.is_empty(), "window_mean on an empty window");
    let d = events[0].dim();
    let mut mean = vec![0.0; d];
    for e in events {
        mean.iter_mut().zip(&e.0).for_each(|(m, v)| *m += v);
    }
    let s = events.len() as f64;
    mean.iter_mut().for_each(|m| *m /= s);
    EventVector(mean)
}

/// Softmax over prototypes of `-||wbar - p_k||^2 / tau`.
pub fn fuzzy_attention(wbar: &[f64], codebook: &PrototypeCodebook) -> Vec<f64> {
    let logits: Vec<f64> = codebook
        .prototypes
        .iter()
        .map(|p| -sq_dist(wbar, p) / codebook.temperature)
        .collect();
    softmax(&logits)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSequence {
    /// One template vector per event.
    pub templates: Vec<Vec<f64>>,
    /// Prototype weights behind each template (K per position).
    pub weights: Vec<Vec<f64>>,
}

impl TemplateSequence {
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.templates.first().map_or(0, Vec::len)
    }

    /// The `n` heaviest prototypes at a position, heaviest first.
    pub fn top_prototypes(&self, index: usize, n: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self.weights[index].iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(n);
        ranked
    }

    /// One JSON object per position: index, template values, top-3 prototypes.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            index: usize,
            values: &'a [f64],
            top: Vec<(usize, f64)>,
        }
        for (index, values) in self.templates.iter().enumerate() {
            let row = Row {
                index,
                values,
                top: self.top_prototypes(index, 3),
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemplateOptions {
    /// Divide each position by its number of contributing scales.
    pub scale_normalize: bool,
}

impl Default for TemplateOptions {
    fn default() -> Self {
        TemplateOptions {
            scale_normalize: true,
        }
    }
}

/// Which window (scale, start) feeds each position. A position gets the
/// window starting at it for every scale where one exists; a tail position
/// with no window at any scale borrows the last window of the smallest scale.
pub fn position_windows(len: usize, windows: &Windows) -> Vec<Vec<(usize, usize)>> {
    let smallest = windows
        .sets
        .iter()
        .min_by_key(|w| w.scale)
        .expect("extract_windows never returns an empty set");
    (0..len)
        .map(|i| {
            let own: Vec<(usize, usize)> = windows
                .sets
                .iter()
                .filter(|w| i < w.count)
                .map(|w| (w.scale, i))
                .collect();
            if own.is_empty() {
                vec![(smallest.scale, smallest.count - 1)]
            } else {
                own
            }
        })
        .collect()
}

pub fn template_embed(
    stream: &[EventVector],
    codebook: &PrototypeCodebook,
    scales: &[usize],
    options: TemplateOptions,
) -> Result<TemplateSequence> {
    let len = stream.len();
    let windows = extract_windows(len, scales)?;
    let k = codebook.k();
    let d = codebook.dim();
    if let Some(e) = stream.iter().find(|e| e.dim() != d) {
        return Err(Error::Config(format!(
            "event dimension {} does not match codebook dimension {d}",
            e.dim()
        )));
    }

    let mut templates = Vec::with_capacity(len);
    let mut weights = Vec::with_capacity(len);
    for sources in position_windows(len, &windows) {
        let mut alpha_sum = vec![0.0; k];
        for &(scale, start) in &sources {
            let wbar = window_mean(&stream[start..start + scale]);
            let alpha = fuzzy_attention(&wbar.0, codebook);
            alpha_sum.iter_mut().zip(&alpha).for_each(|(s, a)| *s += a);
        }
        let divisor = if options.scale_normalize { sources.len() as f64 } else { 1.0 };
        let coeff: Vec<f64> = alpha_sum.iter().map(|a| a / divisor).collect();
        let mut t = vec![0.0; d];
        for (c, p) in coeff.iter().zip(&codebook.prototypes) {
            t.iter_mut().zip(p).for_each(|(ti, pi)| *ti += c * pi);
        }
        let total = sources.len() as f64;
        weights.push(alpha_sum.iter().map(|a| a / total).collect());
        templates.push(t);
    }
    Ok(TemplateSequence { templates, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_events(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<EventVector> {
        (0..t)
            .map(|_| EventVector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect()
    }

    #[test]
    fn window_counts() {
        let w = extract_windows(10, &[3]).unwrap();
        let set = w.sets[0];
        assert_eq!(set.count, 8);
        assert_eq!(set.windows().next(), Some(0..3));
        assert_eq!(set.windows().last(), Some(7..10));

        let w = extract_windows(3, &DEFAULT_SCALES).unwrap();
        assert_eq!(w.sets, vec![WindowSet { scale: 3, count: 1 }]);
        assert_eq!(w.skipped, vec![5, 7]);

        assert!(matches!(
            extract_windows(2, &DEFAULT_SCALES),
            Err(Error::DegenerateInput { len: 2, .. })
        ));
    }

    #[test]
    fn window_mean_cases() {
        let v = EventVector(vec![1.0, -2.0, 0.5]);
        assert_eq!(window_mean(&[v.clone(), v.clone(), v.clone()]), v);
        let neg = EventVector(v.0.iter().map(|x| -x).collect());
        assert_eq!(window_mean(&[v.clone(), neg]), EventVector(vec![0.0; 3]));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let events = random_events(&mut rng, 5, 4);
        let m = window_mean(&events);
        for j in 0..4 {
            let direct = (events[0].0[j] + events[1].0[j] + events[2].0[j] + events[3].0[j] + events[4].0[j]) / 5.0;
            assert!((m.0[j] - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn fuzzy_attention_cases() {
        let book = PrototypeCodebook::new(vec![vec![0.3, 0.4]], 0.5, 0).unwrap();
        assert_eq!(fuzzy_attention(&[9.0, -1.0], &book), vec![1.0]);

        let book = PrototypeCodebook::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], 0.5, 0).unwrap();
        let a = fuzzy_attention(&[0.0, 2.0], &book);
        assert!((a[0] - 0.5).abs() < 1e-15 && (a[1] - 0.5).abs() < 1e-15);

        // softmax(0, -2) = 1 / (1 + e^-2)
        let book = PrototypeCodebook::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]], 0.5, 0).unwrap();
        let a = fuzzy_attention(&[0.0, 0.0], &book);
        assert!((a[0] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((a[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn single_prototype_templates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = vec![0.1, 0.2, -0.3];
        let book = PrototypeCodebook::new(vec![p.clone()], 0.5, 0).unwrap();
        let seq = template_embed(&random_events(&mut rng, 6, 3), &book, &[3], TemplateOptions::default()).unwrap();
        for t in &seq.templates {
            assert_eq!(t, &p);
        }
    }

    #[test]
    fn sharp_temperature_snaps_to_prototype() {
        let protos = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let book = PrototypeCodebook::new(protos.clone(), 1e-3, 0).unwrap();
        let stream = vec![EventVector(protos[2].clone()); 4];
        let seq = template_embed(&stream, &book, &[3], TemplateOptions::default()).unwrap();
        for t in &seq.templates {
            assert!(sq_dist(t, &protos[2]).sqrt() < 1e-6);
        }
    }

    #[test]
    fn unnormalized_sums_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = vec![0.5, -0.5, 1.0];
        let book = PrototypeCodebook::new(vec![p.clone()], 0.5, 0).unwrap();
        let seq = template_embed(
            &random_events(&mut rng, 8, 3),
            &book,
            &[3, 5],
            TemplateOptions { scale_normalize: false },
        )
        .unwrap();
        // position 0 has both scales, position 5 only scale 3, position 7 borrows
        assert_eq!(seq.templates[0], vec![1.0, -1.0, 2.0]);
        assert_eq!(seq.templates[5], p);
        assert_eq!(seq.templates[7], p);
    }

    #[test]
    fn jsonl_rows_per_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let book = PrototypeCodebook::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 0.0]], 0.5, 0).unwrap();
        let seq = template_embed(&random_events(&mut rng, 5, 2), &book, &[3], TemplateOptions::default()).unwrap();
        let mut buf = Vec::new();
        seq.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        let row: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(row["top"].as_array().unwrap().len(), 3);
    }
}
