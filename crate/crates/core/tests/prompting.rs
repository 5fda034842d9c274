use proptest::prelude::*;
use unipact_core::ehr::*;

fn example_record() -> EhrRecord {
    EhrRecord {
        age: Some(30.0),
        race: Some("black African American".into()),
        sex: Some("female".into()),
        temperature: Some(36.1),
        heartrate: Some(88.0),
        resprate: Some(16.0),
        bmi: Some(31.1),
        weight: Some(84.8),
        height: Some(165.1),
        ..Default::default()
    }
}

const EXAMPLE_PROMPT: &str = "The demographics information: 30.0 year-old, black African American, female. \
The vital parameters: temperature 36.1, heartrate 88.0, resprate 16.0. \
The biometrics information: bmi 31.1, weight 84.8, height 165.1.";

#[test]
fn example_record_renders_exactly() {
    let p = render_prompt(&example_record(), &AblationMask::full());
    assert_eq!(p.text, EXAMPLE_PROMPT);
}

#[test]
fn all_groups_masked_renders_empty() {
    let mask = AblationMask {
        include_demographics: false,
        include_vitals: false,
        include_biometrics: false,
        ..AblationMask::full()
    };
    let p = render_prompt(&example_record(), &mask);
    assert_eq!(p.text, "");
    assert!(p.group_spans.is_empty());
    assert_eq!(render_prompt(&example_record(), &AblationMask::ecg_only()).text, "");
}

#[test]
fn single_vital_with_vitals_only_mask() {
    let rec = EhrRecord { heartrate: Some(72.0), ..Default::default() };
    let mask = AblationMask::full().without_group(Group::Demographics).without_group(Group::Biometrics);
    assert_eq!(render_prompt(&rec, &mask).text, "The vital parameters: heartrate 72.0.");
}

#[test]
fn dropping_the_record_drops_every_group() {
    let m = AblationMask { include_ehr: false, ..AblationMask::full() }.normalized();
    for g in Group::ALL {
        assert!(!m.includes(g));
    }
    // includes() applies the rule even on an unnormalized mask
    let raw = AblationMask { include_ehr: false, ..AblationMask::full() };
    assert!(!raw.includes(Group::Vitals));
}

#[test]
fn question_gets_the_answer_instruction() {
    assert_eq!(
        render_question("hypox", "Will the patient experience severe hypoxemia").unwrap(),
        "Will the patient experience severe hypoxemia? Answer strictly with Yes or No."
    );
    let q = render_question("hypox", "Will the patient experience severe hypoxemia?").unwrap();
    assert_eq!(q.matches('?').count(), 1);
    assert!(render_question("x", "").is_err());
    assert!(render_question("x", "  ? ").is_err());
}

#[test]
fn registry_question_renders_the_same_every_time() {
    let reg = unipact_core::synth::TaskRegistry::standard(Default::default(), 0.25, 1);
    let t = reg.tasks.iter().find(|t| t.id.starts_with("mort")).unwrap();
    let first = render_question(&t.id, &t.question).unwrap();
    for _ in 0..100 {
        assert_eq!(render_question(&t.id, &t.question).unwrap(), first);
    }
}

#[test]
fn full_text_matches_fixture() {
    let golden = include_str!("fixtures/example_full_text.txt");
    let prompt = render_prompt(&example_record(), &AblationMask::full());
    let q = render_question("hypox", "Will the patient experience severe hypoxemia").unwrap();
    assert_eq!(assemble_full_text(DEFAULT_ROLE, DEFAULT_TASK_DESC, &prompt, &q), golden);
}

#[test]
fn empty_role_and_task_leave_prompt_and_question() {
    let prompt = render_prompt(&example_record(), &AblationMask::full());
    let text = assemble_full_text("", "", &prompt, "Q? Answer strictly with Yes or No.");
    assert_eq!(text, format!("{EXAMPLE_PROMPT} Q? Answer strictly with Yes or No."));
}

#[test]
fn swapping_role_changes_only_the_role() {
    let prompt = render_prompt(&example_record(), &AblationMask::full());
    let a = assemble_full_text("Role one.", "Task.", &prompt, "Q?");
    let b = assemble_full_text("Another role here.", "Task.", &prompt, "Q?");
    assert_eq!(a.strip_prefix("Role one."), b.strip_prefix("Another role here."));
}

#[test]
fn custom_templates_rename_fields() {
    let reg = TemplateRegistry::parse(
        "demographics=Demo: {age} years, {sex}.\nvitals=Vitals: hr {heartrate}.\nbiometrics=Body: {bmi}.\n",
    )
    .unwrap();
    let p = reg.render_prompt(&example_record(), &AblationMask::full());
    assert_eq!(p.text, "Demo: 30.0 years, female. Vitals: hr 88.0. Body: 31.1.");
    assert!(TemplateRegistry::parse("vitals=Vitals: hr {heartrate}.").is_err());
    assert!(TemplateRegistry::parse("mood=Mood: {x}.").is_err());
}

#[test]
fn inline_records_parse() {
    let r = EhrRecord::parse_inline("age=30, race=black African American, sex=female, temperature=36.1").unwrap();
    assert_eq!(r.age, Some(30.0));
    assert_eq!(r.race.as_deref(), Some("black African American"));
    assert!(EhrRecord::parse_inline("age=old").is_err());
    assert!(EhrRecord::parse_inline("shoe_size=10").is_err());
    assert!(EhrRecord::parse_inline("age").is_err());
    assert!(EhrRecord::parse_inline("age=NaN").is_err());
}

#[test]
fn field_counts_per_group() {
    assert_eq!(EhrRecord::fields(Group::Demographics).len(), 3);
    assert_eq!(EhrRecord::fields(Group::Biometrics).len(), 3);
    assert_eq!(EhrRecord::fields(Group::Vitals).len(), 7);
}

fn opt_num(lo: f64, hi: f64) -> impl Strategy<Value = Option<f64>> {
    prop::option::weighted(0.8, lo..hi)
}

prop_compose! {
    fn any_record()(
        age in opt_num(18.0, 95.0),
        sex in prop::option::of(prop::sample::select(vec!["female", "male"])),
        race in prop::option::of(prop::sample::select(vec!["white", "Asian", "other"])),
        bmi in opt_num(15.0, 55.0),
        weight in opt_num(35.0, 200.0),
        height in opt_num(145.0, 205.0),
        temperature in opt_num(34.5, 41.0),
        heartrate in opt_num(40.0, 160.0),
        resprate in opt_num(8.0, 40.0),
        o2sat in opt_num(75.0, 100.0),
        sbp in opt_num(70.0, 220.0),
        dbp in opt_num(35.0, 130.0),
        pain in opt_num(0.0, 10.0),
    ) -> EhrRecord {
        EhrRecord {
            age, bmi, weight, height, temperature, heartrate, resprate, o2sat, sbp, dbp, pain,
            sex: sex.map(String::from),
            race: race.map(String::from),
        }
    }
}

prop_compose! {
    fn any_mask()(d in any::<bool>(), v in any::<bool>(), b in any::<bool>(), e in any::<bool>()) -> AblationMask {
        AblationMask { include_demographics: d, include_vitals: v, include_biometrics: b, include_ecg: true, include_ehr: e }
    }
}

proptest! {
    #[test]
    fn rendering_is_deterministic(rec in any_record(), mask in any_mask()) {
        prop_assert_eq!(render_prompt(&rec, &mask), render_prompt(&rec, &mask));
    }

    #[test]
    fn numbers_render_with_one_decimal_and_round_trip(rec in any_record()) {
        let text = render_prompt(&rec, &AblationMask::full()).text;
        for g in Group::ALL {
            for name in EhrRecord::fields(g) {
                if let Some(FieldValue::Number(x)) = rec.field(name) {
                    let s = format_number(x);
                    let (_, frac) = s.split_once('.').unwrap();
                    prop_assert_eq!(frac.len(), 1);
                    prop_assert!((s.parse::<f64>().unwrap() - x).abs() <= 0.05 + 1e-9);
                    prop_assert!(text.contains(&s));
                }
            }
        }
    }

    #[test]
    fn spans_are_ordered_disjoint_and_cover_the_sentences(rec in any_record(), mask in any_mask()) {
        let p = render_prompt(&rec, &mask);
        let mut last_end = 0;
        let mut pieces = Vec::new();
        for (i, (_, r)) in p.group_spans.iter().enumerate() {
            prop_assert!(r.start >= last_end);
            if i > 0 {
                prop_assert_eq!(&p.text[last_end..r.start], " ");
            }
            last_end = r.end;
            pieces.push(&p.text[r.clone()]);
        }
        prop_assert_eq!(last_end, p.text.len());
        prop_assert_eq!(pieces.join(" "), p.text.clone());
        let order: Vec<Group> = p.group_spans.iter().map(|(g, _)| *g).collect();
        let mut sorted = order.clone();
        sorted.sort();
        prop_assert_eq!(order, sorted);
    }

    #[test]
    fn masking_keeps_the_remaining_sentences_verbatim(rec in any_record(), mask in any_mask()) {
        let full = render_prompt(&rec, &AblationMask::full());
        let part = render_prompt(&rec, &mask);
        for (g, r) in &part.group_spans {
            let fr = full.span(*g).unwrap();
            prop_assert_eq!(&part.text[r.clone()], &full.text[fr]);
        }
        for (g, _) in &part.group_spans {
            prop_assert!(mask.includes(*g));
        }
    }
}
