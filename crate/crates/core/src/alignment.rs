//! Pairwise and progressive multiple alignment of phoneme sequences.
//!
//! Pairwise alignment is global Needleman-Wunsch with a linear gap penalty,
//! scored through a [`SoundClassModel`]. Multiple alignment merges profiles
//! along a UPGMA guide tree built from normalized pairwise scores.

use std::collections::HashSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::phonology::{ClassId, Phoneme, SoundClassModel, GAP};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AlignmentError {
    #[error("EmptySequence: cannot align an empty phoneme sequence")]
    EmptySequence,
    #[error("DegenerateMatrix: {0}")]
    DegenerateMatrix(String),
    #[error("DuplicateLanguage: `{0}` appears more than once in the cognate set")]
    DuplicateLanguage(String),
    #[error("EmptySequence: nothing to align")]
    NoWords,
}

/// One alignment cell: a phoneme or a gap.
pub type Site = Option<Phoneme>;

pub fn site_str(site: &Site) -> &str {
    site.as_ref().map_or(GAP, Phoneme::as_str)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairwiseAlignment {
    pub row_a: Vec<Site>,
    pub row_b: Vec<Site>,
    pub score: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    /// consume one column of each side
    Diag,
    /// consume a column of the first side against a gap
    Up,
    /// consume a column of the second side against a gap
    Left,
}

/// Global alignment of `n` against `m` columns. Traceback prefers
/// diagonal, then up, then left whenever predecessors tie.
fn needleman_wunsch(
    n: usize,
    m: usize,
    pair: impl Fn(usize, usize) -> i64,
    gap_first: impl Fn(usize) -> i64,
    gap_second: impl Fn(usize) -> i64,
) -> (i64, Vec<Step>) {
    let w = m + 1;
    let mut dp = vec![0i64; (n + 1) * w];
    for i in 1..=n {
        dp[i * w] = dp[(i - 1) * w] + gap_first(i - 1);
    }
    for j in 1..=m {
        dp[j] = dp[j - 1] + gap_second(j - 1);
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dp[(i - 1) * w + j - 1] + pair(i - 1, j - 1);
            let up = dp[(i - 1) * w + j] + gap_first(i - 1);
            let left = dp[i * w + j - 1] + gap_second(j - 1);
            dp[i * w + j] = diag.max(up).max(left);
        }
    }

    let mut steps = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 && here == dp[(i - 1) * w + j - 1] + pair(i - 1, j - 1) {
            steps.push(Step::Diag);
            i -= 1;
            j -= 1;
        } else if i > 0 && here == dp[(i - 1) * w + j] + gap_first(i - 1) {
            steps.push(Step::Up);
            i -= 1;
        } else {
            steps.push(Step::Left);
            j -= 1;
        }
    }
    steps.reverse();
    (dp[n * w + m], steps)
}

/// Optimal global alignment of two phoneme sequences.
pub fn align_pair(
    a: &[Phoneme],
    b: &[Phoneme],
    model: &SoundClassModel,
) -> Result<PairwiseAlignment, AlignmentError> {
    if a.is_empty() || b.is_empty() {
        return Err(AlignmentError::EmptySequence);
    }
    let ca: Vec<ClassId> = a.iter().map(|p| model.class_id(p)).collect();
    let cb: Vec<ClassId> = b.iter().map(|p| model.class_id(p)).collect();
    let gap = i64::from(model.gap_penalty());
    let (score, steps) = needleman_wunsch(
        a.len(),
        b.len(),
        |i, j| i64::from(model.score(ca[i], cb[j])),
        |_| gap,
        |_| gap,
    );

    let mut row_a = Vec::with_capacity(steps.len());
    let mut row_b = Vec::with_capacity(steps.len());
    let (mut ia, mut ib) = (a.iter(), b.iter());
    for step in steps {
        match step {
            Step::Diag => {
                row_a.push(ia.next().cloned());
                row_b.push(ib.next().cloned());
            }
            Step::Up => {
                row_a.push(ia.next().cloned());
                row_b.push(None);
            }
            Step::Left => {
                row_a.push(None);
                row_b.push(ib.next().cloned());
            }
        }
    }
    Ok(PairwiseAlignment {
        row_a,
        row_b,
        score: score as i32,
    })
}

/// Pairwise distances `1 - s(i,j) / max(s(i,i), s(j,j))`, clamped to [0, 1].
pub fn distance_matrix(
    seqs: &[Vec<Phoneme>],
    model: &SoundClassModel,
) -> Result<Vec<Vec<f64>>, AlignmentError> {
    let n = seqs.len();
    let self_scores = seqs
        .iter()
        .map(|s| align_pair(s, s, model).map(|a| a.score))
        .collect::<Result<Vec<_>, _>>()?;
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = align_pair(&seqs[i], &seqs[j], model)?.score;
            let denom = self_scores[i].max(self_scores[j]);
            let dist = if denom > 0 {
                (1.0 - f64::from(s) / f64::from(denom)).clamp(0.0, 1.0)
            } else if seqs[i] == seqs[j] {
                // sequences made only of negatively self-scoring segments
                0.0
            } else {
                1.0
            };
            d[i][j] = dist;
            d[j][i] = dist;
        }
    }
    Ok(d)
}

/// Binary guide tree; leaves index the input sequences.
#[derive(Debug, Clone, PartialEq)]
pub enum GuideTree {
    Leaf(usize),
    Node {
        left: Box<GuideTree>,
        right: Box<GuideTree>,
        height: f64,
    },
}

impl GuideTree {
    pub fn height(&self) -> f64 {
        match self {
            GuideTree::Leaf(_) => 0.0,
            GuideTree::Node { height, .. } => *height,
        }
    }

    /// Leaf indices in left-to-right order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        match self {
            GuideTree::Leaf(i) => out.push(*i),
            GuideTree::Node { left, right, .. } => {
                left.collect_leaves(out);
                right.collect_leaves(out);
            }
        }
    }
}

/// UPGMA clustering. Clusters are numbered in creation order (leaves first)
/// and ties go to the lexicographically smallest pair of cluster numbers.
pub fn build_upgma(d: &[Vec<f64>]) -> Result<GuideTree, AlignmentError> {
    let n = d.len();
    if n < 2 {
        return Err(AlignmentError::DegenerateMatrix(format!(
            "need at least 2 items, got {n}"
        )));
    }
    if d.iter().any(|row| row.len() != n) {
        return Err(AlignmentError::DegenerateMatrix("matrix is not square".into()));
    }

    let total = 2 * n - 1;
    let mut dist = vec![vec![0.0f64; total]; total];
    for i in 0..n {
        for j in 0..n {
            dist[i][j] = d[i][j];
        }
    }
    let mut nodes: Vec<Option<(GuideTree, usize)>> = (0..n)
        .map(|i| Some((GuideTree::Leaf(i), 1)))
        .collect();
    let mut active: Vec<usize> = (0..n).collect();

    while active.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for (x, &i) in active.iter().enumerate() {
            for &j in &active[x + 1..] {
                if best.is_none_or(|(bd, _, _)| dist[i][j] < bd) {
                    best = Some((dist[i][j], i, j));
                }
            }
        }
        let (merge_d, i, j) = best.expect("at least two active clusters");
        let (left, size_i) = nodes[i].take().expect("active cluster");
        let (right, size_j) = nodes[j].take().expect("active cluster");
        let height = (merge_d / 2.0).max(left.height()).max(right.height());
        let new_id = nodes.len();
        for &k in &active {
            if k != i && k != j {
                let v = (size_i as f64 * dist[i][k] + size_j as f64 * dist[j][k])
                    / (size_i + size_j) as f64;
                dist[new_id][k] = v;
                dist[k][new_id] = v;
            }
        }
        nodes.push(Some((
            GuideTree::Node {
                left: Box::new(left),
                right: Box::new(right),
                height,
            },
            size_i + size_j,
        )));
        active.retain(|&k| k != i && k != j);
        active.push(new_id);
    }
    Ok(nodes.pop().flatten().expect("root").0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MsaRow {
    pub language: String,
    pub sites: Vec<Site>,
}

impl MsaRow {
    pub fn degapped(&self) -> Vec<Phoneme> {
        self.sites.iter().flatten().cloned().collect()
    }
}

/// A multiple alignment: equal-length gapped rows, one per language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Msa {
    rows: Vec<MsaRow>,
}

impl Msa {
    /// Validates equal row lengths and the absence of all-gap columns.
    pub fn new(rows: Vec<MsaRow>) -> Result<Self, AlignmentError> {
        let width = rows.first().map_or(0, |r| r.sites.len());
        if rows.is_empty() || width == 0 {
            return Err(AlignmentError::NoWords);
        }
        if rows.iter().any(|r| r.sites.len() != width) {
            return Err(AlignmentError::DegenerateMatrix("rows differ in length".into()));
        }
        if (0..width).any(|c| rows.iter().all(|r| r.sites[c].is_none())) {
            return Err(AlignmentError::DegenerateMatrix("all-gap column".into()));
        }
        Ok(Msa { rows })
    }

    /// Parse rows of whitespace-separated tokens, `-` for gaps.
    pub fn from_strs(rows: &[(&str, &str)]) -> Result<Self, AlignmentError> {
        let rows = rows
            .iter()
            .map(|(lang, sites)| {
                let sites = sites
                    .split_whitespace()
                    .map(|t| {
                        if t == GAP {
                            Ok(None)
                        } else {
                            Phoneme::new(t).map(Some).map_err(|_| AlignmentError::EmptySequence)
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(MsaRow {
                    language: lang.to_string(),
                    sites,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Msa::new(rows)
    }

    pub fn rows(&self) -> &[MsaRow] {
        &self.rows
    }

    pub fn width(&self) -> usize {
        self.rows[0].sites.len()
    }

    pub fn row(&self, language: &str) -> Option<&MsaRow> {
        self.rows.iter().find(|r| r.language == language)
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = &Site> {
        self.rows.iter().map(move |r| &r.sites[c])
    }

    /// Rows as `(language, token strings)`, gaps rendered as `-`.
    pub fn token_rows(&self) -> Vec<(String, Vec<String>)> {
        self.rows
            .iter()
            .map(|r| {
                let toks = r.sites.iter().map(|s| site_str(s).to_string()).collect();
                (r.language.clone(), toks)
            })
            .collect()
    }

    /// `LANG<TAB>site1<TAB>site2...`, one line per row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&row.language);
            for s in &row.sites {
                let _ = write!(out, "\t{}", site_str(s));
            }
            out.push('\n');
        }
        out
    }
}

/// A group of already-aligned rows, indexed into the original word list.
struct Profile {
    members: Vec<usize>,
    sites: Vec<Vec<Site>>,
    classes: Vec<Vec<Option<ClassId>>>,
}

impl Profile {
    fn leaf(idx: usize, word: &[Phoneme], model: &SoundClassModel) -> Self {
        Profile {
            members: vec![idx],
            sites: vec![word.iter().cloned().map(Some).collect()],
            classes: vec![word.iter().map(|p| Some(model.class_id(p))).collect()],
        }
    }

    fn width(&self) -> usize {
        self.sites[0].len()
    }

    fn non_gaps(&self, c: usize) -> i64 {
        self.classes.iter().filter(|r| r[c].is_some()).count() as i64
    }
}

/// Sum-of-pairs profile merge. Comparing the summed (not averaged) pair
/// scores is equivalent because both profile sizes are fixed for one merge.
fn merge_profiles(x: Profile, y: Profile, model: &SoundClassModel) -> Profile {
    let gap = i64::from(model.gap_penalty());
    let (nx, ny) = (x.classes.len() as i64, y.classes.len() as i64);
    let pair = |i: usize, j: usize| -> i64 {
        let mut total = 0;
        for rx in &x.classes {
            for ry in &y.classes {
                total += match (rx[i], ry[j]) {
                    (Some(a), Some(b)) => i64::from(model.score(a, b)),
                    (Some(_), None) | (None, Some(_)) => gap,
                    (None, None) => 0,
                };
            }
        }
        total
    };
    let gap_x: Vec<i64> = (0..x.width()).map(|i| gap * x.non_gaps(i) * ny).collect();
    let gap_y: Vec<i64> = (0..y.width()).map(|j| gap * y.non_gaps(j) * nx).collect();
    let (_, steps) = needleman_wunsch(x.width(), y.width(), pair, |i| gap_x[i], |j| gap_y[j]);

    let mut members = x.members.clone();
    members.extend(&y.members);
    let rows = x.sites.len() + y.sites.len();
    let mut sites = vec![Vec::with_capacity(steps.len()); rows];
    let mut classes = vec![Vec::with_capacity(steps.len()); rows];
    let (mut i, mut j) = (0, 0);
    for step in steps {
        let (take_x, take_y) = match step {
            Step::Diag => (true, true),
            Step::Up => (true, false),
            Step::Left => (false, true),
        };
        for r in 0..x.sites.len() {
            sites[r].push(if take_x { x.sites[r][i].clone() } else { None });
            classes[r].push(if take_x { x.classes[r][i] } else { None });
        }
        for r in 0..y.sites.len() {
            let out = x.sites.len() + r;
            sites[out].push(if take_y { y.sites[r][j].clone() } else { None });
            classes[out].push(if take_y { y.classes[r][j] } else { None });
        }
        i += usize::from(take_x);
        j += usize::from(take_y);
    }
    Profile {
        members,
        sites,
        classes,
    }
}

fn align_along(tree: &GuideTree, words: &[&[Phoneme]], model: &SoundClassModel) -> Profile {
    match tree {
        GuideTree::Leaf(i) => Profile::leaf(*i, words[*i], model),
        GuideTree::Node { left, right, .. } => {
            let l = align_along(left, words, model);
            let r = align_along(right, words, model);
            merge_profiles(l, r, model)
        }
    }
}

/// Progressive multiple alignment. The result does not depend on the order
/// of `words` (the guide tree is built over words sorted by language), and
/// output rows follow the input order.
pub fn progressive_align(
    words: &[(String, Vec<Phoneme>)],
    model: &SoundClassModel,
) -> Result<Msa, AlignmentError> {
    if words.is_empty() {
        return Err(AlignmentError::NoWords);
    }
    let mut seen = HashSet::new();
    for (lang, word) in words {
        if !seen.insert(lang.as_str()) {
            return Err(AlignmentError::DuplicateLanguage(lang.clone()));
        }
        if word.is_empty() {
            return Err(AlignmentError::EmptySequence);
        }
    }
    if words.len() == 1 {
        let (lang, word) = &words[0];
        return Msa::new(vec![MsaRow {
            language: lang.clone(),
            sites: word.iter().cloned().map(Some).collect(),
        }]);
    }

    let mut order: Vec<usize> = (0..words.len()).collect();
    order.sort_by(|&a, &b| words[a].0.cmp(&words[b].0));
    let sorted: Vec<Vec<Phoneme>> = order.iter().map(|&i| words[i].1.clone()).collect();
    let tree = build_upgma(&distance_matrix(&sorted, model)?)?;
    let refs: Vec<&[Phoneme]> = sorted.iter().map(Vec::as_slice).collect();
    let profile = align_along(&tree, &refs, model);

    let mut rows: Vec<Option<MsaRow>> = vec![None; words.len()];
    for (member, sites) in profile.members.into_iter().zip(profile.sites) {
        let original = order[member];
        rows[original] = Some(MsaRow {
            language: words[original].0.clone(),
            sites,
        });
    }
    Msa::new(rows.into_iter().map(|r| r.expect("every word aligned")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phonology::segment;

    fn seg(s: &str) -> Vec<Phoneme> {
        segment(s).unwrap()
    }

    fn words(items: &[(&str, &str)]) -> Vec<(String, Vec<Phoneme>)> {
        items.iter().map(|(l, f)| (l.to_string(), seg(f))).collect()
    }

    #[test]
    fn identical_singletons() {
        let m = SoundClassModel::builtin();
        let al = align_pair(&seg("n"), &seg("n"), &m).unwrap();
        assert_eq!(al.row_a, vec![Some(seg("n")[0].clone())]);
        assert_eq!(al.row_b, al.row_a);
        assert_eq!(al.score, m.score_symbols("N", "N").unwrap());
    }

    #[test]
    fn two_against_one() {
        // The five global alignments of [a,b] vs [b]:
        //   (a,-)(b,b)       = gap + s(P,P)
        //   (a,b)(b,-)       = s(A,B) + gap
        //   (a,-)(b,-)(-,b)  = 3 gap
        //   (a,-)(-,b)(b,-)  = 3 gap
        //   (-,b)(a,-)(b,-)  = 3 gap
        let m = SoundClassModel::builtin();
        let al = align_pair(&seg("a b"), &seg("b"), &m).unwrap();
        assert_eq!(al.row_a, vec![Some(seg("a")[0].clone()), Some(seg("b")[0].clone())]);
        assert_eq!(al.row_b, vec![None, Some(seg("b")[0].clone())]);
        assert_eq!(al.score, m.gap_penalty() + m.score_symbols("P", "P").unwrap());
    }

    #[test]
    fn empty_sequence_rejected() {
        let m = SoundClassModel::builtin();
        assert_eq!(align_pair(&[], &seg("a"), &m), Err(AlignmentError::EmptySequence));
    }

    #[test]
    fn distances() {
        let m = SoundClassModel::builtin();
        let d = distance_matrix(&[seg("k a t"), seg("k a t")], &m).unwrap();
        assert_eq!(d[0][1], 0.0);
        assert_eq!(d[0][0], 0.0);

        // k and g share a class, so kat/gat score like kat/kat
        let d = distance_matrix(&[seg("k a t"), seg("g a t"), seg("m a")], &m).unwrap();
        assert_eq!(d[0][1], 0.0);
        // best kat/ma is (k,m)(a,a)(t,-) = -2 + 5 - 4 = -1, so the
        // unclamped distance 1 + 1/15 is clamped to 1
        assert_eq!(d[0][2], 1.0);
        assert_eq!(d[2][0], d[0][2]);
    }

    #[test]
    fn upgma_two_items() {
        let t = build_upgma(&[vec![0.0, 0.6], vec![0.6, 0.0]]).unwrap();
        match t {
            GuideTree::Node { left, right, height } => {
                assert_eq!(*left, GuideTree::Leaf(0));
                assert_eq!(*right, GuideTree::Leaf(1));
                assert!((height - 0.3).abs() < 1e-12);
            }
            _ => panic!("expected a node"),
        }
    }

    #[test]
    fn upgma_four_items() {
        let d = vec![
            vec![0.0, 0.1, 0.8, 0.9],
            vec![0.1, 0.0, 0.7, 0.8],
            vec![0.8, 0.7, 0.0, 0.2],
            vec![0.9, 0.8, 0.2, 0.0],
        ];
        let t = build_upgma(&d).unwrap();
        let GuideTree::Node { left, right, height } = t else {
            panic!()
        };
        assert_eq!(left.leaves(), vec![0, 1]);
        assert_eq!(right.leaves(), vec![2, 3]);
        assert!((left.height() - 0.05).abs() < 1e-12);
        assert!((right.height() - 0.1).abs() < 1e-12);
        // cross distance: mean of 0.8, 0.9, 0.7, 0.8
        assert!((height - 0.4).abs() < 1e-12);
    }

    #[test]
    fn upgma_ties_use_lowest_pair() {
        let d = vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]];
        let t = build_upgma(&d).unwrap();
        let GuideTree::Node { left, right, .. } = t else { panic!() };
        assert_eq!(*left, GuideTree::Leaf(2));
        assert_eq!(right.leaves(), vec![0, 1]);
        assert_eq!(build_upgma(&d).unwrap(), build_upgma(&d).unwrap());
    }

    #[test]
    fn upgma_degenerate() {
        assert!(matches!(
            build_upgma(&[vec![0.0]]),
            Err(AlignmentError::DegenerateMatrix(_))
        ));
    }

    #[test]
    fn single_word_msa() {
        let m = SoundClassModel::builtin();
        let msa = progressive_align(&words(&[("la", "k a n i s")]), &m).unwrap();
        assert_eq!(msa.width(), 5);
        assert!(msa.rows()[0].sites.iter().all(Option::is_some));
    }

    #[test]
    fn identical_words_have_no_gaps() {
        let m = SoundClassModel::builtin();
        let msa = progressive_align(&words(&[("a", "p a t e r"), ("b", "p a t e r")]), &m).unwrap();
        assert_eq!(msa.width(), 5);
        assert!(msa.rows().iter().all(|r| r.sites.iter().all(Option::is_some)));
    }

    #[test]
    fn duplicate_language_rejected() {
        let m = SoundClassModel::builtin();
        let err = progressive_align(&words(&[("a", "p a"), ("a", "p o")]), &m).unwrap_err();
        assert_eq!(err, AlignmentError::DuplicateLanguage("a".into()));
    }

    #[test]
    fn juniper_cognate_set() {
        let m = SoundClassModel::builtin();
        let w = words(&[
            ("French", "ʒ ə n j ɛ v ʁ"),
            ("Italian", "d͡ʒ i n e p r o"),
            ("Spanish", "x u n i p e ɾ o"),
            ("Latin", "j uː n ɪ p ɛ r ʊ m"),
        ]);
        let msa = progressive_align(&w, &m).unwrap();
        assert_eq!(msa.width(), 10, "\n{}", msa.to_tsv());
        let last: Vec<_> = msa.column(9).map(Option::is_some).collect();
        assert_eq!(last, vec![false, false, false, true], "\n{}", msa.to_tsv());
        assert_eq!(site_str(&msa.rows()[3].sites[9]), "m");
        for (row, (_, word)) in msa.rows().iter().zip(&w) {
            assert_eq!(&row.degapped(), word);
        }
    }

    #[test]
    fn tsv_rendering() {
        let msa = Msa::from_strs(&[("a", "p - a"), ("b", "p o a")]).unwrap();
        assert_eq!(msa.to_tsv(), "a\tp\t-\ta\nb\tp\to\ta\n");
        assert!(Msa::from_strs(&[("a", "p -"), ("b", "p -")]).is_err());
    }
}
