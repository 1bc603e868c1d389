//! Built-in reference paragraphs and condition-code glossary used as the
//! default knowledge source. Each paragraph is short enough to stay a single
//! chunk at the default chunk size.

const DOCUMENTS: &[(&str, &str)] = &[
    (
        "conduction/rbbb.txt",
        "Right bundle branch block (RBBB) produces a prolonged QRS duration of 120 ms or more with an M-shaped RSR' pattern in leads V1-V3. \
         The terminal S wave is broad and slurred in leads I, aVL, V5 and V6. \
         Secondary repolarisation changes with T wave inversion in the right precordial leads are expected.",
    ),
    (
        "conduction/lbbb.txt",
        "Left bundle branch block (LBBB) widens the QRS complex beyond 120 ms with broad notched R waves in leads I, aVL, V5 and V6. \
         Septal q waves disappear from the lateral leads and deep S waves appear in V1-V3. \
         ST segments and T waves point away from the main QRS deflection.",
    ),
    (
        "rhythm/sinus_rhythm.txt",
        "Normal sinus rhythm has a regular rate between 60 and 100 beats per minute with an upright P wave before every narrow QRS complex in lead II. \
         The PR interval lies between 120 and 200 ms. \
         T waves are upright in most leads and follow the direction of the QRS complex.",
    ),
    (
        "rhythm/sinus_bradycardia.txt",
        "Sinus bradycardia is a regular rhythm with a slow heart rate below 60 beats per minute and long RR intervals between narrow QRS complexes. \
         Each QRS complex is preceded by a normal upright P wave in lead II. \
         It is common in trained athletes and during sleep.",
    ),
    (
        "rhythm/sinus_tachycardia.txt",
        "Sinus tachycardia is a regular rhythm with a fast heart rate above 100 beats per minute and short RR intervals between narrow QRS complexes. \
         P waves keep a normal axis but may merge with the preceding T wave at high rates. \
         Fever, pain and hypovolemia are frequent causes.",
    ),
    (
        "rhythm/atrial_fibrillation.txt",
        "Atrial fibrillation shows an irregularly irregular ventricular rhythm with no discernible P waves and a fibrillatory baseline. \
         The RR intervals vary from beat to beat while the QRS complexes usually stay narrow.",
    ),
    (
        "conduction/first_degree_av_block.txt",
        "First degree atrioventricular block lengthens the PR interval beyond 200 ms while every P wave is still conducted to the ventricles. \
         The QRS morphology is otherwise unchanged.",
    ),
    (
        "infarction/inferior_mi.txt",
        "Inferior myocardial infarction shows pathological Q waves and ST elevation in leads II, III and aVF. \
         Reciprocal ST depression is often seen in leads I and aVL.",
    ),
    (
        "hypertrophy/lvh.txt",
        "Left ventricular hypertrophy increases QRS voltage with tall R waves in V5 and V6 and deep S waves in V1 and V2. \
         A strain pattern of ST depression with asymmetric T wave inversion in the lateral leads may accompany it.",
    ),
    (
        "ischemia/st_t_changes.txt",
        "Myocardial ischemia causes horizontal or downsloping ST depression and symmetric T wave inversion in the affected territory. \
         The changes may be transient and resolve at rest.",
    ),
    (
        "ectopy/pvc.txt",
        "A premature ventricular complex is an early wide and bizarre QRS complex without a preceding P wave. \
         It is usually followed by a full compensatory pause and a T wave opposite to the QRS direction.",
    ),
    (
        "basics/intervals.txt",
        "The QRS duration measures ventricular depolarisation and is normally below 120 ms. \
         The QT interval shortens as heart rate rises, so it is corrected for rate before interpretation.",
    ),
    (
        "basics/leads.txt",
        "The twelve-lead ECG records six limb leads and six precordial leads. \
         Leads V1 and V2 face the right ventricle and septum, while V5 and V6 face the lateral wall of the left ventricle.",
    ),
    (
        "repolarisation/long_qt.txt",
        "Long QT syndrome prolongs the corrected QT interval beyond 460 ms and flattens or notches the T wave. \
         It predisposes to polymorphic ventricular tachycardia.",
    ),
];

const GLOSSARY: &[(&str, &str)] = &[
    ("NORM", "normal sinus rhythm"),
    ("SR", "normal sinus rhythm"),
    ("SBRAD", "sinus bradycardia"),
    ("STACH", "sinus tachycardia"),
    ("RBBB", "right bundle branch block"),
    ("CRBBB", "complete right bundle branch block"),
    ("LBBB", "left bundle branch block"),
    ("CLBBB", "complete left bundle branch block"),
    ("AFIB", "atrial fibrillation"),
    ("AF", "atrial fibrillation"),
    ("1AVB", "first degree atrioventricular block"),
    ("IMI", "inferior myocardial infarction"),
    ("LVH", "left ventricular hypertrophy"),
    ("ISC_", "myocardial ischemia"),
    ("PVC", "premature ventricular complex"),
    ("LQT", "long QT syndrome"),
];

/// `(source, text)` pairs for [`KnowledgeBase::build`](super::KnowledgeBase::build).
pub fn seed_documents() -> impl Iterator<Item = (&'static str, &'static str)> {
    DOCUMENTS.iter().copied()
}

/// Expanded name of a condition code, if known. Case-insensitive.
pub fn expand_label(label: &str) -> Option<&'static str> {
    GLOSSARY
        .iter()
        .find(|(code, _)| code.eq_ignore_ascii_case(label.trim()))
        .map(|(_, name)| *name)
}
