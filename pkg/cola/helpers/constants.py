CONFIG_DIRECTORY = "data/configs"
OUTPUT_DIRECTORY = "data/output"
HELP_MESSAGES = {
    "verify": "Check the gradient-learning identities numerically and report every check.",
    "train": "Train one adapter set (or the base model) on the configured data.",
    "ftaas": "Train K users' adapters over one shared frozen base model.",
    "cost": "Print the computation-space counts of FT, PEFT and ColA for the configured model.",
    "plot": "Emit learning-curve data from a metrics file as CSV.",
    "config": "Pre-defined config name (from cola/data/configs/) or file path to a config file.",
    "seed": "Seed for every random draw of the verification checks.",
    "json": "File path to write the verification report as JSON.",
    "output": "File path for the metrics JSON-lines file (a .meta.json companion is written next to it).",
    "users": "The number of collaborating users K.",
    "mode": "The collaboration setup: joint (one shared adapter set), alone (K sets, never merged) "
    "or collab (K sets merged every step).",
    "csv": "File path to also write the table as CSV.",
    "metrics": "File path of a metrics JSON-lines file.",
    "split": "Only keep metrics lines of this split (train, test or test_merged).",
    "plot_output": "File path for the CSV; printed to stdout when omitted.",
    "checkpoint": "File path to save the final adapters to.",
    "message_log": "File path for a JSON-lines log of every offload message.",
    "verbose": "Log debug output, including offload message traffic.",
    "batch_size": "Overrides the batch size B of the config.",
}
