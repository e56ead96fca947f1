use super::lexicon::{TokenId, VerbForm, Vocabulary, WordClass};
use crate::error::{contract_err, Result};
use crate::metrics::{cider_d, IdfStats};

/// Tense category 1..=5 from the first verb form, scanning left to right:
/// none → 1, copula + -ing/participle → 2, -ing → 3, finite → 4, past → 5.
pub fn tag_tense(tokens: &[TokenId], vocab: &Vocabulary) -> Result<u8> {
    let classes: Vec<WordClass> = tokens
        .iter()
        .map(|&t| vocab.class(t))
        .collect::<Result<_>>()?;
    for (i, c) in classes.iter().enumerate() {
        let WordClass::Verb(form) = *c else { continue };
        let after_copula = i > 0 && classes[i - 1] == WordClass::Copula;
        return Ok(match form {
            VerbForm::Ing | VerbForm::Past | VerbForm::Participle if after_copula => 2,
            VerbForm::Ing => 3,
            VerbForm::Base | VerbForm::Third => 4,
            VerbForm::Past | VerbForm::Participle => 5,
        });
    }
    Ok(1)
}

/// Number of tokens in the noun lexicon, plurals included.
pub fn count_nouns(tokens: &[TokenId], vocab: &Vocabulary) -> Result<usize> {
    let mut n = 0;
    for &t in tokens {
        if vocab.class(t)? == WordClass::Noun {
            n += 1;
        }
    }
    Ok(n)
}

/// CIDEr-D of a reference caption against the other references of its scene.
pub fn assign_quality<R: AsRef<[TokenId]>>(
    caption: &[TokenId],
    others: &[R],
    idf: &IdfStats,
) -> Result<f64> {
    if others.is_empty() {
        return contract_err("quality needs at least one other reference");
    }
    Ok(cider_d(caption, others, idf))
}

/// Quality of every reference of one scene: leave-one-out, or scored
/// against all references (itself included) when `include_self`.
pub fn reference_qualities<R: AsRef<[TokenId]>>(
    refs: &[R],
    idf: &IdfStats,
    include_self: bool,
) -> Result<Vec<f64>> {
    (0..refs.len())
        .map(|i| {
            let others: Vec<&[TokenId]> = refs
                .iter()
                .enumerate()
                .filter(|&(j, _)| include_self || j != i)
                .map(|(_, r)| r.as_ref())
                .collect();
            assign_quality(refs[i].as_ref(), &others, idf)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(v: &Vocabulary, s: &str) -> Vec<TokenId> {
        v.encode(s).unwrap()
    }

    #[test]
    fn tense_examples() {
        let v = Vocabulary::standard();
        let t = |s| tag_tense(&enc(&v, s), &v).unwrap();
        assert_eq!(t("a dog with a frisbee in its mouth"), 1);
        assert_eq!(t("a dog is holding a frisbee in its mouth"), 2);
        assert_eq!(t("a dog holding a frisbee in its mouth"), 3);
        assert_eq!(t("a dog carries a frisbee in its mouth"), 4);
        assert_eq!(t("a dog carried a frisbee in its mouth"), 5);
        assert_eq!(t("a kite is flown"), 2);
        assert_eq!(t("a boy flown a kite"), 5);
        assert_eq!(t(""), 1);
    }

    #[test]
    fn noun_examples() {
        let v = Vocabulary::standard();
        let n = |s| count_nouns(&enc(&v, s), &v).unwrap();
        assert_eq!(n("a young boy is playing tennis"), 2);
        assert_eq!(n("a dog with a frisbee in its mouth"), 3);
        assert_eq!(n("a dog near trees"), 2);
        assert_eq!(n(""), 0);
    }

    #[test]
    fn unknown_id_is_lexicon_error() {
        let v = Vocabulary::standard();
        assert!(matches!(
            tag_tense(&[v.len()], &v),
            Err(crate::Error::Lexicon(_))
        ));
        assert!(matches!(
            count_nouns(&[v.len() + 3], &v),
            Err(crate::Error::Lexicon(_))
        ));
    }

    #[test]
    fn quality_examples() {
        let v = Vocabulary::standard();
        let c = enc(&v, "a dog holding a frisbee in its mouth");
        let other = enc(&v, "a cat is near a house");
        let disjoint = enc(&v, "tennis");
        let idf = IdfStats::from_reference_sets(&[
            vec![c.clone()],
            vec![other.clone()],
            vec![disjoint.clone()],
        ]);
        let q = assign_quality(&c, &[c.clone(), c.clone(), c.clone(), c.clone()], &idf).unwrap();
        assert!((q - 10.0).abs() < 1e-12);
        assert_eq!(
            assign_quality(&disjoint, std::slice::from_ref(&c), &idf).unwrap(),
            0.0
        );
        assert!(assign_quality::<Vec<usize>>(&c, &[], &idf).is_err());
    }
}
