//! Small deterministic datasets for tests, demos and smoke runs.

use crate::corpus::{serialize_context, Polarity, Role, TrainingExample, Turn};

const POSITIVE: [(&str, &str); 8] = [
    ("i passed my driving test this morning", "congratulations that is great news"),
    ("my sister had a healthy baby girl", "how wonderful you must be thrilled"),
    ("we finally bought our first house", "amazing enjoy your new home"),
    ("i got the job i wanted", "well done you earned it"),
    ("my team won the championship game", "what a fantastic season for you"),
    ("my best friend visited me yesterday", "that sounds like a lovely day"),
    ("i finished my first marathon", "impressive you should be proud"),
    ("my garden is blooming beautifully", "enjoy those bright flowers"),
];

const NEGATIVE: [(&str, &str); 8] = [
    ("my dog passed away last night", "i am so sorry for your loss"),
    ("i failed my final exam", "that is rough try again soon"),
    ("someone stole my bike from work", "that is awful did you report it"),
    ("i lost my wallet on the train", "how stressful i hope it turns up"),
    ("my flight got cancelled again", "ugh that is really frustrating"),
    ("i was laid off today", "i am sorry that must hurt"),
    ("my car broke down on the highway", "oh no are you safe now"),
    ("nobody came to my birthday party", "that sounds lonely i am sorry"),
];

/// Sixteen single-turn examples whose polarity follows from the context
/// wording, half positive and half negative.
pub fn separable_examples() -> Vec<TrainingExample> {
    let mut out = Vec::with_capacity(16);
    for (i, ((ctx_pos, tgt_pos), (ctx_neg, tgt_neg))) in POSITIVE.iter().zip(NEGATIVE.iter()).enumerate() {
        for (ctx, tgt, polarity, tag) in [
            (ctx_pos, tgt_pos, Polarity::Positive, "pos"),
            (ctx_neg, tgt_neg, Polarity::Negative, "neg"),
        ] {
            let turns = [Turn {
                role: Role::Speaker,
                text: ctx.to_string(),
            }];
            out.push(TrainingExample {
                context_text: serialize_context(&turns),
                target_text: tgt.to_string(),
                polarity,
                conversation_id: format!("fixture:{tag}:{i}"),
                turn_index: 1,
            });
        }
    }
    out
}
