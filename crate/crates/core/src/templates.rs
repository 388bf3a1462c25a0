//! Fixed prompt texts shipped with the engine.
//!
//! The summarizer, optimizer and template-replacer system prompts are used
//! verbatim; changing a single byte changes every scripted fixture that
//! anchors on them.

/// Step block added to prompts that have no step-by-step instructions.
/// Two steps: a short analysis of the problem, then the solution.
pub const DEFAULT_STEP_INSTRUCTIONS: &str = "Solve the task step by step:\n\
1. Briefly analyze the problem: restate what is asked and note the constraints that the answer has to satisfy.\n\
2. Produce the solution in the required output format.\n\
\n";

pub const SUMMARIZER_SYSTEM: &str = "You are a summarizer. You wil be provided with a chat history from an AI assistant and the user. Please choose one of the following that you believe is the case, and summarize the focus point as instructed:

a). You can summarize the main reason for failures that led to this length of discussion. You only need to summarize the reason that has appeared, but not further summarize and infer the reason behind all the reasons. Make sure you choose only one reason at a time.

b). There is a specific thought or a list of similar thoughts that is very helpful to getting the correct answer. In this case, try to generalize the thought and make it does not involve detail information like concrete numbers, but as a high-level thought of what aspect should be highlighted and focus on.

c). There is no general reason that leads to a failure. It is case-by-case errors that is inevitable.

First, do some short analysis, and then finish your conclusion in one single line, starting with: \"In conclusion, the main focus point should be: \"";

/// User message for the summarizer; `<Chat History>` is replaced with the
/// serialized transcripts.
pub const SUMMARIZER_USER: &str = "Here is the chat history, please follow the instructions above and tell me what is the main focus point should be in the required format:

<Chat History>";

pub const CHAT_HISTORY_SLOT: &str = "<Chat History>";

/// Header placed before the prompt under optimization in the summarizer's
/// user message.
pub const SUMMARIZER_PROMPT_HEADER: &str = "Current prompt under optimization:";

pub const CONCLUSION_MARKER: &str = "In conclusion, the main focus point should be: ";

pub const SUMMARIZER_RETRY_NOTE: &str = "Your answer could not be used: it must end with one single line starting with \"In conclusion, the main focus point should be: \" and that line must not contain concrete numbers such as prices, dates or times. Please answer again in the required format.";

pub const OPTIMIZER_SYSTEM: &str = "You are a prompt optimizer. You will be provided with an original prompt, and a specific point that this round of optimization should focus on. Your job is to update the prompt based on the provided focus point. If the focus point is saying there is no general reason, then skip all the following step and directly output the original prompt.

In the process, do the following steps one by one:

1. List a few different options that could address the given focus point.

2. Choose the solution that you think is the most promising. Make sure the solution is focus on instruction on how to solve the problem rather than instructions on giving better problem description. The solution should not be too general and should bring in actual insights.

3. Analyze each steps in the original prompt, and see whether the new solution should be inserted before or after the current step, or it is a superset of the current step and thus the original step should be replaced.

4. Finish your output with your final prompt, in the format of: \"Based on the above analysis, the improved prompt is: \".



A few common solutions for specific problems are:

- If some details are missed, a sentence by sentence check ahead of time could be helpful.

- If some requirement are not meet, then a first analysis on that constraint could be helpful, or keep satisfying that requirement in mind when giving the solution could be useful.

- If it is already a thought, then a check on whether the thought is still workable in the given scenario is very helpful. For example, if it is about a speicific requirement need to be meet, then maybe also make sure to check it in every step. However, make sure this does not limit what the feedback can provide, and using words like \"specifically\" to remind such a check.


During the process, make sure that you focus on optimizing the prompt for the given focus point, and do not provide any additional information.

Do not change any other part of the prompt. Only focus on the step-by-step instructions. Especially, do not change the examples and the format requirement. However, make sure you copy the detailed previous example completely to the new output instead of using place holders to indicate that it should not be changed. Do not worry about the output length caused by the examples.

Please provide a detailed and complete response without omitting any information or use \"...\" or \"[...]\"to replace any part of the prompt. Again, ensure that no information is omitted or summarized.";

/// `{prompt}` and `{focus}` are substituted.
pub const OPTIMIZER_USER: &str = "Here is the original prompt:

{prompt}

Here is the focus point of this round of optimization:

{focus}";

pub const FINAL_PROMPT_MARKER: &str = "Based on the above analysis, the improved prompt is: ";

/// `{problems}` is substituted with the violations found in the last output.
pub const OPTIMIZER_RETRY_NOTE: &str = "Your previous answer could not be used: {problems}. Please redo the optimization. Keep every part of the prompt other than the step-by-step instructions exactly as it was, copy the examples and the format requirement completely, and finish with \"Based on the above analysis, the improved prompt is: \" followed by the complete prompt.";

pub const REPAIR_SYSTEM: &str = "You are a template replacer. You will be provided with an original prompt, and an optimized prompt. Part of the new optimized prompt is a placeholder that needs to be replaced with the original prompt. Your job is to replace the placeholder with the original prompt.

One example of the placeholder is: \" \u{27e8} Original Prompt Start \u{27e9} \". You need to replace this placeholder with the original prompt.

Another exmpale is <Examples from the original prompt>. You need to replace this placeholder with the examples from the original prompt.

Output directly the new prompt with the placeholder replaced. Do not provide any additional note or analysis.";

/// `{original}` and `{candidate}` are substituted.
pub const REPAIR_USER: &str = "Original prompt:

{original}

Optimized prompt:

{candidate}";

pub const REPAIR_RETRY_NOTE: &str = "The output still contains placeholders or does not contain the examples of the original prompt verbatim. Output the complete optimized prompt again with every placeholder replaced by the corresponding original text.";

/// Reflection instruction used by the reflexion-style feedback generator.
/// `{finish_marker}` is substituted.
pub const REFLECTION_SYSTEM: &str = "You are reviewing the work of an AI assistant on a task. Read the conversation below, check the latest answer against every requirement stated in the task, and point out the most important mistake in one or two sentences without giving the full solution. If the latest answer satisfies every requirement, reply with {finish_marker} only.";

pub const REFLECTION_USER_HEADER: &str = "Here is the conversation so far:";
