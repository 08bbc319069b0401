import json

from _events import arg, checkpoint, log, loop, restore

RECALLS = [0.50, 0.70, 0.65, 0.80, 0.78]
ACCS = [0.61, 0.74, 0.72, 0.83, 0.81]


def evaluate(state):
    i = state["epoch"] % len(RECALLS)
    return ACCS[i], RECALLS[i]


hidden_size = arg("hidden", 500)
num_epochs = arg("epochs", 5)
batch_size = arg("batch_size", 32)
learning_rate = arg("lr", 1e-3)
seed = arg("seed", 0)
steps = 2

state = {"epoch": -1, "w": (seed % 7) / 10}
for epoch in loop("epoch", range(num_epochs)):
    saved = restore("epoch", epoch, "model")
    if saved is not None:
        state = json.loads(saved)
    else:
        for step in loop("step", range(steps)):
            state["w"] = round(state["w"] * 0.9 + learning_rate * hidden_size / (step + 1), 6)
            loss = round(1.0 / (1 + epoch * steps + step) + state["w"] / 100, 6)
            log("loss", loss)
        state["epoch"] = epoch
        checkpoint("model", json.dumps(state, sort_keys=True).encode(), epoch)
    acc, recall = evaluate(state)
    log("acc", acc)
    log("recall", recall)
