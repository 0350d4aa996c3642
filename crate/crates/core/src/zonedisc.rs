//! Zone discovery with latent Dirichlet allocation.
//!
//! Grid indices are words, trajectories are sentences and every area is one
//! document. Topics are fitted by collapsed Gibbs sampling and each grid is
//! labelled with the topic its tokens most often carry.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::landuse::ZonePlan;

pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_SWEEPS: usize = 200;

pub fn default_alpha(topics: usize) -> f64 {
    50.0 / topics as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    vocab: usize,
    documents: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn new(vocab: usize, documents: Vec<Vec<usize>>) -> Result<Self> {
        if let Some(bad) = documents.iter().flatten().find(|&&w| w >= vocab) {
            return Err(Error::invalid("corpus", format!("token {bad} outside vocabulary of {vocab}")));
        }
        Ok(Self { vocab, documents })
    }

    /// One document per area: the concatenation of its trajectories.
    pub fn from_trajectories<'a>(n: usize, areas: impl IntoIterator<Item = &'a [Vec<usize>]>) -> Result<Self> {
        let documents = areas.into_iter().map(|t| t.concat()).collect();
        Self::new(n * n, documents)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn documents(&self) -> &[Vec<usize>] {
        &self.documents
    }

    pub fn tokens(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopicModelState {
    pub topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub iterations: usize,
    corpus: Corpus,
    assignments: Vec<Vec<usize>>,
    doc_topic: Vec<usize>,
    topic_word: Vec<usize>,
    topic_total: Vec<usize>,
    rng: ChaCha8Rng,
}

impl TopicModelState {
    /// Uniformly random initial assignment.
    pub fn init(corpus: Corpus, topics: usize, alpha: f64, beta: f64, seed: u64) -> Result<Self> {
        if topics == 0 {
            return Err(Error::invalid("topics", "need at least one topic"));
        }
        if corpus.tokens() == 0 {
            return Err(Error::invalid("corpus", "no tokens"));
        }
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(Error::invalid("hyperparameters", format!("alpha {alpha}, beta {beta}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = corpus.vocab;
        let mut doc_topic = vec![0; corpus.documents.len() * topics];
        let mut topic_word = vec![0; topics * v];
        let mut topic_total = vec![0; topics];
        let assignments = corpus
            .documents
            .iter()
            .enumerate()
            .map(|(d, doc)| {
                doc.iter()
                    .map(|&w| {
                        let k = rng.random_range(0..topics);
                        doc_topic[d * topics + k] += 1;
                        topic_word[k * v + w] += 1;
                        topic_total[k] += 1;
                        k
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            topics,
            alpha,
            beta,
            seed,
            iterations: 0,
            corpus,
            assignments,
            doc_topic,
            topic_word,
            topic_total,
            rng,
        })
    }

    /// One full Gibbs sweep over every token.
    pub fn sweep(&mut self) {
        let (m, v) = (self.topics, self.corpus.vocab);
        let vbeta = v as f64 * self.beta;
        let mut weights = vec![0.0; m];
        for (d, doc) in self.corpus.documents.iter().enumerate() {
            for (i, &w) in doc.iter().enumerate() {
                let old = self.assignments[d][i];
                self.doc_topic[d * m + old] -= 1;
                self.topic_word[old * v + w] -= 1;
                self.topic_total[old] -= 1;

                let mut total = 0.0;
                for (k, wk) in weights.iter_mut().enumerate() {
                    *wk = (self.doc_topic[d * m + k] as f64 + self.alpha)
                        * (self.topic_word[k * v + w] as f64 + self.beta)
                        / (self.topic_total[k] as f64 + vbeta);
                    total += *wk;
                }
                let mut u = self.rng.random::<f64>() * total;
                let mut new = m - 1;
                for (k, &wk) in weights.iter().enumerate() {
                    if u < wk {
                        new = k;
                        break;
                    }
                    u -= wk;
                }

                self.assignments[d][i] = new;
                self.doc_topic[d * m + new] += 1;
                self.topic_word[new * v + w] += 1;
                self.topic_total[new] += 1;
            }
        }
        self.iterations += 1;
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn doc_topic(&self, doc: usize, topic: usize) -> usize {
        self.doc_topic[doc * self.topics + topic]
    }

    pub fn topic_word(&self, topic: usize, word: usize) -> usize {
        self.topic_word[topic * self.corpus.vocab + word]
    }

    pub fn topic_total(&self, topic: usize) -> usize {
        self.topic_total[topic]
    }

    /// Recounts all matrices from the assignments and compares.
    pub fn is_consistent(&self) -> bool {
        let (m, v) = (self.topics, self.corpus.vocab);
        let mut dt = vec![0; self.doc_topic.len()];
        let mut tw = vec![0; self.topic_word.len()];
        let mut tt = vec![0; m];
        for (d, (doc, z)) in self.corpus.documents.iter().zip(&self.assignments).enumerate() {
            if doc.len() != z.len() {
                return false;
            }
            for (&w, &k) in doc.iter().zip(z) {
                if k >= m {
                    return false;
                }
                dt[d * m + k] += 1;
                tw[k * v + w] += 1;
                tt[k] += 1;
            }
        }
        dt == self.doc_topic && tw == self.topic_word && tt == self.topic_total
    }

    /// Topic with the most tokens in the corpus, ties to the lowest id.
    pub fn majority_topic(&self) -> usize {
        argmax_counts(&self.topic_total)
    }
}

fn argmax_counts(counts: &[usize]) -> usize {
    counts
        .iter()
        .enumerate()
        .fold((0, 0), |best, (k, &c)| if c > best.1 { (k, c) } else { best })
        .0
}

pub fn fit_topics(corpus: Corpus, topics: usize, alpha: f64, beta: f64, iterations: usize, seed: u64) -> Result<TopicModelState> {
    if iterations == 0 {
        return Err(Error::invalid("iterations", "need at least one sweep"));
    }
    let mut state = TopicModelState::init(corpus, topics, alpha, beta, seed)?;
    for _ in 0..iterations {
        state.sweep();
        debug_assert!(state.is_consistent());
    }
    Ok(state)
}

/// Labels every grid of document `doc` on an `n x n` lattice.
///
/// Visited grids take their majority topic (ties to the lowest id). Unvisited
/// grids copy the nearest visited grid by Manhattan distance (ties to the lowest
/// grid index); an area with no visits takes the corpus majority topic.
pub fn assign_zone_labels(state: &TopicModelState, doc: usize, n: usize) -> Result<ZonePlan> {
    let tokens = state
        .corpus
        .documents
        .get(doc)
        .ok_or_else(|| Error::invalid("document", format!("{doc} out of range")))?;
    if state.corpus.vocab != n * n {
        return Err(Error::invalid("grid", format!("{n}x{n} lattice for vocabulary {}", state.corpus.vocab)));
    }
    let m = state.topics;
    let mut counts = vec![0usize; n * n * m];
    for (&w, &k) in tokens.iter().zip(&state.assignments[doc]) {
        counts[w * m + k] += 1;
    }
    let visited: Vec<Option<usize>> = counts
        .chunks(m)
        .map(|c| c.iter().any(|&x| x > 0).then(|| argmax_counts(c)))
        .collect();
    let visited_cells: Vec<usize> = (0..n * n).filter(|&g| visited[g].is_some()).collect();
    if visited_cells.is_empty() {
        return Ok(ZonePlan::uniform(n, state.majority_topic()));
    }
    let labels = (0..n * n)
        .map(|g| {
            visited[g].unwrap_or_else(|| {
                let (r, c) = ((g / n) as isize, (g % n) as isize);
                let nearest = visited_cells
                    .iter()
                    .min_by_key(|&&h| ((h / n) as isize - r).abs() + ((h % n) as isize - c).abs())
                    .copied()
                    .expect("nonempty");
                visited[nearest].expect("visited")
            })
        })
        .collect();
    ZonePlan::new(n, labels)
}

/// Zone plans for every document.
pub fn discover_zones(state: &TopicModelState, n: usize) -> Result<Vec<ZonePlan>> {
    (0..state.corpus.documents.len()).map(|d| assign_zone_labels(state, d, n)).collect()
}

/// Fraction of grids matching after the best relabelling of `found` onto
/// `planted`, searched exhaustively over permutations of `0..m`.
pub fn best_permutation_accuracy(planted: &[ZonePlan], found: &[ZonePlan], m: usize) -> f64 {
    let mut perm: Vec<usize> = (0..m).collect();
    let total: usize = planted.iter().map(|p| p.labels().len()).sum();
    let mut best = 0;
    loop {
        let hits: usize = planted
            .iter()
            .zip(found)
            .map(|(p, f)| p.labels().iter().zip(f.labels()).filter(|(a, b)| **a == perm[**b]).count())
            .sum();
        best = best.max(hits);
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best as f64 / total as f64
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_corpus() -> Corpus {
        Corpus::new(4, vec![vec![0, 1, 1, 2], vec![3, 3, 0], vec![2]]).unwrap()
    }

    #[test]
    fn single_topic_takes_everything() {
        let s = fit_topics(small_corpus(), 1, 50.0, 0.01, 5, 1).unwrap();
        assert!(s.assignments().iter().flatten().all(|&k| k == 0));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Corpus::new(4, vec![vec![4]]).is_err());
        assert!(fit_topics(Corpus::new(4, vec![vec![]]).unwrap(), 2, 1.0, 0.1, 3, 0).is_err());
        assert!(fit_topics(small_corpus(), 0, 1.0, 0.1, 3, 0).is_err());
        assert!(fit_topics(small_corpus(), 2, 1.0, 0.1, 0, 0).is_err());
    }

    #[test]
    fn counts_stay_consistent_and_seeded() {
        let mut s = TopicModelState::init(small_corpus(), 3, 1.0, 0.1, 7).unwrap();
        assert!(s.is_consistent());
        for _ in 0..20 {
            s.sweep();
            assert!(s.is_consistent());
        }
        let a = fit_topics(small_corpus(), 3, 1.0, 0.1, 20, 7).unwrap();
        assert_eq!(a.assignments(), s.assignments());
        assert_eq!(a.iterations, 20);
    }

    fn with_assignments(corpus: Corpus, topics: usize, z: Vec<Vec<usize>>) -> TopicModelState {
        let mut s = TopicModelState::init(corpus, topics, 1.0, 0.1, 0).unwrap();
        let v = s.corpus.vocab;
        s.doc_topic.iter_mut().for_each(|x| *x = 0);
        s.topic_word.iter_mut().for_each(|x| *x = 0);
        s.topic_total.iter_mut().for_each(|x| *x = 0);
        for (d, (doc, zs)) in s.corpus.documents.clone().iter().zip(&z).enumerate() {
            for (&w, &k) in doc.iter().zip(zs) {
                s.doc_topic[d * topics + k] += 1;
                s.topic_word[k * v + w] += 1;
                s.topic_total[k] += 1;
            }
        }
        s.assignments = z;
        assert!(s.is_consistent());
        s
    }

    #[test]
    fn majority_label_per_grid() {
        let corpus = Corpus::new(4, vec![vec![0, 0, 0, 1, 2, 3]]).unwrap();
        let s = with_assignments(corpus, 3, vec![vec![2, 2, 1, 0, 1, 1]]);
        assert_eq!(assign_zone_labels(&s, 0, 2).unwrap().labels(), &[2, 0, 1, 1]);
    }

    #[test]
    fn ties_take_lowest_topic() {
        let corpus = Corpus::new(4, vec![vec![0, 0, 1, 2, 3]]).unwrap();
        let s = with_assignments(corpus, 3, vec![vec![2, 1, 0, 0, 0]]);
        assert_eq!(assign_zone_labels(&s, 0, 2).unwrap().get(0, 0), 1);
    }

    #[test]
    fn checkerboard_fallback_3x3() {
        // visited: corners and the centre
        //   0 . 1
        //   . 1 .
        //   0 . 0
        let corpus = Corpus::new(9, vec![vec![0, 2, 4, 6, 8]]).unwrap();
        let s = with_assignments(corpus, 2, vec![vec![0, 1, 1, 0, 0]]);
        let plan = assign_zone_labels(&s, 0, 3).unwrap();
        // grid 1 is distance 1 from 0, 2, 4: lowest index 0 -> label 0
        // grid 3 is distance 1 from 0, 4, 6 -> grid 0 -> label 0
        // grid 5 is distance 1 from 2, 4, 8 -> grid 2 -> label 1
        // grid 7 is distance 1 from 4, 6, 8 -> grid 4 -> label 1
        assert_eq!(plan.labels(), &[0, 0, 1, 0, 1, 1, 0, 1, 0]);
    }

    #[test]
    fn unvisited_area_takes_corpus_majority() {
        let corpus = Corpus::new(4, vec![vec![0, 1, 2], vec![]]).unwrap();
        let s = with_assignments(corpus, 2, vec![vec![1, 1, 0], vec![]]);
        assert_eq!(assign_zone_labels(&s, 1, 2).unwrap(), ZonePlan::uniform(2, 1));
    }

    #[test]
    fn permutation_accuracy() {
        let a = ZonePlan::new(2, vec![0, 0, 1, 1]).unwrap();
        let b = ZonePlan::new(2, vec![1, 1, 0, 1]).unwrap();
        assert_eq!(best_permutation_accuracy(&[a], &[b], 2), 0.75);
        let mut p = vec![0, 1, 2];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 6);
    }
}
