# sms timbre
