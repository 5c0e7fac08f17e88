use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{ObjectClass, SceneSpec};
use super::tables::{phrase_table, template, TemplateKind, Vocab, EOS, NUM_VIEWS};
use crate::error::{Error, Result};
use crate::nn::params::keyed_rng;

/// A templated question about one scene with rule-derived labels and answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySample {
    pub scene_id: u32,
    pub template_id: usize,
    pub raw: String,
    pub view_labels: [bool; NUM_VIEWS],
    pub answer_ids: Vec<u32>,
    pub explicit: bool,
}

impl QuerySample {
    pub fn labels_f32(&self) -> [f32; NUM_VIEWS] {
        self.view_labels.map(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn label_bits(&self) -> u8 {
        self.view_labels
            .iter()
            .enumerate()
            .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i))
    }

    pub fn labeled_views(&self) -> Vec<usize> {
        (0..NUM_VIEWS).filter(|&v| self.view_labels[v]).collect()
    }
}

fn form(n: usize, class: ObjectClass) -> String {
    let noun = if n == 1 { class.singular() } else { class.plural() };
    format!("{n} {noun}")
}

fn parse_class(rule: &str, prefix: &str) -> Result<ObjectClass> {
    ObjectClass::parse(&rule[prefix.len()..])
        .ok_or_else(|| Error::Format(format!("unknown class in answer rule `{rule}`")))
}

/// Evaluates an answer rule over the labelled views of a scene.
pub fn answer_text(spec: &SceneSpec, rule: &str, views: &[usize]) -> Result<String> {
    let text = if rule == "inventory" {
        let parts: Vec<String> = ObjectClass::ALL
            .iter()
            .map(|&c| (c, spec.count(c, views)))
            .filter(|&(_, n)| n > 0)
            .map(|(c, n)| form(n, c))
            .collect();
        if parts.is_empty() {
            "nothing".to_string()
        } else {
            parts.join(" and ")
        }
    } else if rule.starts_with("count:") {
        let c = parse_class(rule, "count:")?;
        form(spec.count(c, views), c)
    } else if rule.starts_with("presence:") {
        let c = parse_class(rule, "presence:")?;
        match spec.count(c, views) {
            0 => format!("no {}", c.plural()),
            n => format!("yes {}", form(n, c)),
        }
    } else if rule == "safety" {
        match spec.count(ObjectClass::Vehicle, views) {
            0 => "safe".to_string(),
            n => format!("not safe {}", form(n, ObjectClass::Vehicle)),
        }
    } else if rule == "planning" {
        match spec.count(ObjectClass::Pedestrian, views) {
            0 => "keep going".to_string(),
            n => format!("slow down for {}", form(n, ObjectClass::Pedestrian)),
        }
    } else {
        return Err(Error::Format(format!("unknown answer rule `{rule}`")));
    };
    Ok(text)
}

/// Instantiates template `template_id` for `spec`; `seed` picks the view of
/// explicit templates.
pub fn gen_query(spec: &SceneSpec, template_id: usize, seed: u64) -> Result<QuerySample> {
    let t = template(template_id)?;
    let table = phrase_table();
    let (raw, views) = match t.kind {
        TemplateKind::Explicit => {
            let mut rng = keyed_rng(seed, "query.", &format!("{}:{template_id}", spec.scene_id));
            let v = rng.gen_range(0..NUM_VIEWS);
            (t.text.replace("{view}", &table.views[v]), vec![v])
        }
        TemplateKind::Implicit => (t.text.clone(), t.views.clone()),
        TemplateKind::Global => (t.text.clone(), (0..NUM_VIEWS).collect()),
    };
    let mut view_labels = [false; NUM_VIEWS];
    for &v in &views {
        view_labels[v] = true;
    }
    let vocab = Vocab::standard();
    let mut answer_ids = vocab.encode(&answer_text(spec, &t.answer, &views)?);
    answer_ids.push(EOS);
    Ok(QuerySample {
        scene_id: spec.scene_id,
        template_id,
        raw,
        view_labels,
        answer_ids,
        explicit: t.kind == TemplateKind::Explicit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::scene::gen_scene;
    use crate::corpus::tables::{templates, UNK};

    #[test]
    fn explicit_back_view() {
        let s = gen_scene(1, 1);
        // find a seed choosing the back view for template 0
        let q = (0..200)
            .map(|seed| gen_query(&s, 0, seed).unwrap())
            .find(|q| q.raw == "what is in the back camera ?")
            .unwrap();
        assert!(q.explicit);
        assert_eq!(q.view_labels, [false, false, false, true, false, false]);
    }

    #[test]
    fn implicit_and_global_labels() {
        let s = gen_scene(2, 1);
        let q = gen_query(&s, 4, 0).unwrap();
        assert!(!q.explicit);
        assert_eq!(q.labeled_views(), vec![2, 5]);
        let q = gen_query(&s, 12, 0).unwrap();
        assert_eq!(q.view_labels, [true; 6]);
        assert!(gen_query(&s, 500, 0).is_err());
    }

    #[test]
    fn answers_are_known_words_ending_in_eos() {
        for id in 0..30 {
            let s = gen_scene(id, 3);
            for t in templates() {
                let q = gen_query(&s, t.id, id as u64).unwrap();
                assert_eq!(*q.answer_ids.last().unwrap(), EOS);
                assert!(!q.answer_ids.contains(&UNK), "{:?}", q);
                assert_eq!(q, gen_query(&s, t.id, id as u64).unwrap());
            }
        }
    }

    #[test]
    fn inventory_rule() {
        use crate::corpus::scene::{BBox, SceneObject};
        let obj = |class| SceneObject {
            class,
            bbox: BBox { x: 0, y: 0, w: 4, h: 4 },
            color: [0.0; 3],
        };
        let mut s = gen_scene(0, 0);
        s.views = vec![Vec::new(); NUM_VIEWS];
        s.views[1] = vec![obj(ObjectClass::Cone), obj(ObjectClass::Pedestrian), obj(ObjectClass::Cone)];
        assert_eq!(answer_text(&s, "inventory", &[1]).unwrap(), "1 pedestrian and 2 cones");
        assert_eq!(answer_text(&s, "inventory", &[0]).unwrap(), "nothing");
        assert_eq!(answer_text(&s, "planning", &[1]).unwrap(), "slow down for 1 pedestrian");
        assert_eq!(answer_text(&s, "presence:vehicle", &[1]).unwrap(), "no vehicles");
    }
}
