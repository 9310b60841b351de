from salient_align.cli import main

main()
