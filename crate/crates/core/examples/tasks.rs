// Turning detection, grounding and human-object-interaction annotations
// into a shared (prompt, labels, boxes) sample form.

use efh::training::tasks::{convert_task, Interaction, RawAnnotation, RawObject, OD_TEMPLATES};
use efh_numcore::seeded_rng;

pub fn run_example() -> efh::Result<()> {
    let mut rng = seeded_rng(1);
    let cup = RawObject { name: "cup".into(), bbox: [0.3, 0.6, 0.1, 0.2] };
    let table = RawObject { name: "table".into(), bbox: [0.5, 0.8, 0.9, 0.3] };

    let od = RawAnnotation { image: "kitchen.ppm".into(), objects: vec![cup.clone(), table.clone()], ..Default::default() };
    let grounding = RawAnnotation { caption: Some("a cup on the table".into()), ..od.clone() };
    let hoi = RawAnnotation {
        image: "field.ppm".into(),
        interactions: vec![Interaction {
            subject: "person".into(),
            verb: "ride".into(),
            object: "horse".into(),
            subject_bbox: [0.5, 0.3, 0.2, 0.4],
            object_bbox: [0.5, 0.6, 0.5, 0.4],
        }],
        ..Default::default()
    };
    let big = RawAnnotation {
        image: "many.ppm".into(),
        vocabulary: (0..300).map(|i| format!("category {i}")).collect(),
        ..Default::default()
    };

    for (kind, raw) in [("od", &od), ("grounding", &grounding), ("hoi", &hoi), ("phrase-grounding", &big)] {
        let s = convert_task(raw, kind, OD_TEMPLATES, &mut rng, 64)?;
        println!("{kind:>16}: {:?} with {} labels", s.prompt, s.labels.len());
    }
    Ok(())
}

fn main() -> efh::Result<()> {
    run_example()
}
