from cocokit.cli import run

run()
